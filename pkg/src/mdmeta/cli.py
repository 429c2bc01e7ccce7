"""Command-line pipeline: collect-data, fit-ensemble, meta-train, evaluate, verify.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diffengine as ad
from .controller import Gains
from .dynamics import OracleDisturbance, PlanarQuadrotor, WindDrag
from .ensemble import FitConfig, TrajectoryDataset, collect_trajectory, fit_surrogate
from .features import MlpParams
from .metatrain import (MetaParams, TaskSet, TrainConfig, controller_from_flat, init_meta_params,
                        make_references, sample_tasks, train, W_MAX)
from .potential import PotentialParams
from .reference import double_loop, random_spline_reference
from .simulate import (MDController, RolloutDiverged, read_trajectory_csv, rms, rollout,
                       write_trajectory_csv)
from . import plotting, verify

log = logging.getLogger("mdmeta")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
THREADS_ENV = "MDMETA_THREADS"
STREAMS = ("tasks", "references", "surrogates", "init", "training", "evaluation")


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


def substream(root: int, name: str) -> np.random.SeedSequence:
    """Named child of the root seed; independent of creation order."""
    return np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))


def substream_int(root: int, name: str, index: int = 0) -> int:
    return int(substream(root, name).spawn(index + 1)[index].generate_state(1, np.uint32)[0])


@dataclass
class ExperimentConfig:
    train: TrainConfig
    data: dict = field(default_factory=lambda: {"T_e": 10.0, "dt": 0.02, "step_scale": 0.5})
    fit: dict = field(default_factory=lambda: {"steps": 2000, "lr": 1e-3})
    evaluation: dict = field(default_factory=lambda: {
        "wind_speeds": [2.0, 4.0, 6.0, 8.0, 10.0], "reference": "double_loop",
        "T_eval": 10.0, "dt_eval": 0.02})
    paths: dict = field(default_factory=lambda: {
        "data_dir": "data", "models_dir": "models", "reports_dir": "reports"})
    base: Path = Path(".")

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, Path(path).resolve().parent, seed)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path("."), seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        try:
            tc = TrainConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad training config: {exc}") from exc
        if seed is not None:
            tc.seed = int(seed)
        cfg = cls(tc, base=base)
        for block in ("data", "fit", "evaluation", "paths"):
            extra = doc.get(block, {})
            if not isinstance(extra, dict):
                raise UsageError(f"config block '{block}' must be an object")
            getattr(cfg, block).update(extra)
        cfg.validate()
        return cfg

    def validate(self):
        t = self.train
        if t.M < 1 or t.N < 1 or t.steps < 0 or t.d < 1:
            raise UsageError("M, N, d must be positive and steps nonnegative")
        if t.T <= 0 or t.dt <= 0 or t.lr <= 0:
            raise UsageError("T, dt and lr must be positive")
        if t.p_init <= 1.05:
            raise UsageError("p_init must exceed 1.05")
        winds = self.evaluation.get("wind_speeds", [])
        if not winds or any(float(w) < 0 for w in winds):
            raise UsageError("evaluation.wind_speeds must be a nonempty list of nonnegative speeds")
        if self.evaluation.get("reference") not in ("double_loop", "spline"):
            raise UsageError("evaluation.reference must be 'double_loop' or 'spline'")

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        p = p if p.is_absolute() else self.base / p
        p.mkdir(parents=True, exist_ok=True)
        return p

    def to_dict(self) -> dict:
        doc = self.train.to_dict()
        doc.update({"data": self.data, "fit": self.fit, "evaluation": self.evaluation,
                    "paths": self.paths})
        return doc


def _dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _stream_record(root: int) -> dict:
    return {name: [int(root), zlib.crc32(name.encode())] for name in STREAMS}


# ---------------------------------------------------------------- commands

def cmd_collect_data(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    root, M = cfg.train.seed, cfg.train.M
    data_dir = cfg.path("data_dir")
    winds = sample_tasks(substream(root, "tasks"), M)
    tasks = []
    for j, w in enumerate(winds):
        seed_j = substream_int(root, "references", j)
        ds = collect_trajectory(float(w), seed_j, cfg.data["T_e"], cfg.data["dt"],
                                step_scale=cfg.data["step_scale"])
        name = f"task_{j:03d}.csv"
        write_trajectory_csv(data_dir / name, ds.to_trajectory())
        tasks.append({"j": j, "w": float(w), "seed": seed_j, "file": name})
        log.info("task %d: w=%.4f -> %s", j, w, name)
    _dump_json(data_dir / "manifest.json", {
        "version": __version__, "root_seed": root, "streams": _stream_record(root),
        "wind_distribution": {"scale": W_MAX, "beta": [5.0, 9.0]},
        "data": cfg.data, "tasks": tasks})
    print(f"wrote {M} task trajectories to {data_dir}")
    return EXIT_OK


def _manifest(cfg: ExperimentConfig) -> dict:
    path = cfg.path("data_dir") / "manifest.json"
    if not path.exists():
        raise UsageError(f"{path} not found; run collect-data first")
    return _load_json(path)


def cmd_fit_ensemble(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    man = _manifest(cfg)
    data_dir, models_dir = cfg.path("data_dir"), cfg.path("models_dir")
    fit_cfg = FitConfig(steps=int(cfg.fit["steps"]), lr=float(cfg.fit["lr"]))
    rows = []
    for task in man["tasks"]:
        tr = read_trajectory_csv(data_dir / task["file"])
        ds = TrajectoryDataset(tr.t, tr.q, tr.qd, tr.u, task["w"], task["seed"], tr.q_r)
        seed = substream_int(cfg.train.seed, "surrogates", task["j"])
        res = fit_surrogate(ds, seed, fit_cfg)
        name = f"surrogate_{task['j']:03d}.json"
        _dump_json(models_dir / name, res.params.to_dict(
            task=task["j"], w=task["w"], one_step_loss=res.best_loss, baseline_loss=res.baseline_loss))
        rows.append((task["j"], task["w"], res.best_loss, res.baseline_loss, name))
        log.info("surrogate %d: loss %.3e (zero net %.3e)", task["j"], res.best_loss, res.baseline_loss)
    with open(cfg.path("reports_dir") / "fit_report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["task", "w", "one_step_loss", "baseline_loss", "file"])
        for j, w, loss, base, name in rows:
            wr.writerow([j, f"{w:.17g}", f"{loss:.17g}", f"{base:.17g}", name])
    print(f"fitted {len(rows)} surrogate models into {models_dir}")
    return EXIT_OK


def _task_set(cfg: ExperimentConfig) -> TaskSet:
    man = _manifest(cfg)
    t = cfg.train
    if len(man["tasks"]) != t.M:
        raise UsageError(f"manifest has {len(man['tasks'])} tasks but config M = {t.M}")
    models_dir = cfg.path("models_dir")
    surrogates = None
    if not t.true_dynamics:
        surrogates = []
        for task in man["tasks"]:
            path = models_dir / f"surrogate_{task['j']:03d}.json"
            if not path.exists():
                raise UsageError(f"{path} not found; run fit-ensemble first")
            surrogates.append(MlpParams.from_dict(_load_json(path)))
    winds = np.array([task["w"] for task in man["tasks"]])
    refs = make_references(substream(t.seed, "training"), t.M, t.N, t.T)
    return TaskSet(winds, surrogates, refs, t.T)


def checkpoint_tag(learn_p: bool, p: float) -> str:
    return "learn_p" if learn_p else f"fixed_p{p:g}"


def cmd_meta_train(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    t = cfg.train
    if args.fixed_p is not None:
        t.learn_p, t.p_init = False, float(args.fixed_p)
    elif args.learn_p:
        t.learn_p = True
    cfg.validate()
    tasks = _task_set(cfg)
    init_seed = substream_int(t.seed, "init")
    init = init_meta_params(init_seed, t.d, t.architecture, t.p_init)
    models_dir, reports_dir = cfg.path("models_dir"), cfg.path("reports_dir")
    candidates = []
    if t.learn_p:
        # the fixed-p family is a subset of the learnable one: let its result compete
        for path in sorted(models_dir.glob("checkpoint_fixed_p*.json")):
            mp, _ = MetaParams.from_dict(_load_json(path))
            if mp.layout == init.layout:
                candidates.append(mp.flatten())
    tag = checkpoint_tag(t.learn_p, t.p_init)

    def progress(step, loss, p):
        if step % 10 == 0:
            log.info("[%s] step %d loss %.6g p %.4f", tag, step, loss, p)

    res = train(t, tasks, init, candidates, progress)
    doc = res.params.to_dict(res.frozen_p)
    doc.update({"best_loss": res.best_loss, "best_source": res.best_source,
                "config": cfg.to_dict(), "init_seed": init_seed, "tag": tag})
    _dump_json(models_dir / f"checkpoint_{tag}.json", doc)
    with open(reports_dir / f"history_{tag}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "meta_loss", "decoded_p", "min_gain", "max_gain"])
        for step, loss, p, gmin, gmax in res.history:
            wr.writerow([step, f"{loss:.17g}", f"{p:.17g}", f"{gmin:.17g}", f"{gmax:.17g}"])
    plotting.loss_history([h[0] for h in res.history], [h[1] for h in res.history],
                          reports_dir / f"history_{tag}.svg", tag)
    print(f"{tag}: best meta_loss {res.best_loss:.6g} (p = {doc['p']:.6g}) -> checkpoint_{tag}.json")
    return EXIT_OK


def load_controller(path, eps: float | None = None):
    doc = _load_json(path)
    try:
        mp, frozen = MetaParams.from_dict(doc)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path} is not a meta-training checkpoint: {exc}") from exc
    if eps is None:
        eps = float(doc.get("config", {}).get("epsilon", 1e-3))
    ctrl = controller_from_flat(mp.flatten(), mp.layout, eps, frozen)
    return ctrl, doc


def evaluation_reference(cfg: ExperimentConfig):
    ev = cfg.evaluation
    if ev["reference"] == "double_loop":
        return double_loop(float(ev["T_eval"]))
    return random_spline_reference(substream(cfg.train.seed, "evaluation"), float(ev["T_eval"]))


def evaluate_checkpoint(ctrl: MDController, winds, ref, T: float, dt: float):
    model = PlanarQuadrotor()
    out = []
    for w in winds:
        tr = rollout(model, WindDrag(w=float(w)), ctrl, ref, T, dt, meta={"w": float(w)})
        out.append((float(w), rms(tr), tr))
    return out


def _fmt_w(w: float) -> str:
    return f"{w:g}".replace(".", "p")


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed) if args.config else ExperimentConfig(TrainConfig())
    winds = cfg.evaluation["wind_speeds"]
    if args.winds:
        try:
            winds = [float(x) for x in args.winds.split(",") if x.strip()]
        except ValueError as exc:
            raise UsageError(f"--winds must be comma separated numbers: {exc}") from exc
        if not winds:
            raise UsageError("--winds is empty")
    reports_dir = Path(args.out) if args.out else cfg.path("reports_dir")
    reports_dir.mkdir(parents=True, exist_ok=True)
    ref = evaluation_reference(cfg)
    T, dt = float(cfg.evaluation["T_eval"]), float(cfg.evaluation["dt_eval"])
    table = {}
    for ck in args.checkpoint:
        ctrl, doc = load_controller(ck)
        tag = doc.get("tag") or Path(ck).stem
        results = evaluate_checkpoint(ctrl, winds, ref, T, dt)
        table[tag] = results
        with open(reports_dir / f"evaluation_{tag}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["w", "rms", "in_distribution"])
            for w, r, _ in results:
                wr.writerow([f"{w:g}", f"{r:.17g}", int(w <= W_MAX)])
        for w, r, tr in results:
            stem = f"eval_{tag}_w{_fmt_w(w)}"
            write_trajectory_csv(reports_dir / f"{stem}.csv", tr)
            plotting.state_history(tr, reports_dir / f"{stem}_states.svg", f"{tag}, w = {w:g} m/s")
        plotting.phase_plot({f"w = {w:g}": tr for w, _, tr in results},
                            reports_dir / f"phase_{tag}.svg", tag)
        print(f"{tag}: " + ", ".join(f"w={w:g} rms={r:.4g}" for w, r, _ in results))
    if len(table) > 1:
        tags = list(table)
        with open(reports_dir / "comparison.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["w", "in_distribution"] + [f"rms_{tg}" for tg in tags])
            for i, w in enumerate(winds):
                wr.writerow([f"{w:g}", int(w <= W_MAX)] + [f"{table[tg][i][1]:.17g}" for tg in tags])
    return EXIT_OK


# ---------------------------------------------------------------- oracle / verify

ORACLE_DEFAULTS = {
    "d": 50, "a_seed": 0, "a_norm": 1.0, "feature_seed": 1, "delta": 0.0, "perturbation_seed": 2,
    "lam": 2.0, "K": 5.0, "P": 0.1, "p": 2.0, "eps": 1e-3, "T": 10.0, "dt": 0.005,
    "reference": "double_loop", "violation_allowance": 0.01,
}


@dataclass
class OracleSetup:
    cfg: dict
    a: np.ndarray
    disturbance: OracleDisturbance
    features: verify.PerturbedFeatures
    gains: Gains
    pp: PotentialParams
    ref: object

    @classmethod
    def from_config(cls, doc: dict) -> "OracleSetup":
        unknown = set(doc) - set(ORACLE_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown oracle config keys: {sorted(unknown)}")
        cfg = dict(ORACLE_DEFAULTS, **doc)
        d = int(cfg["d"])
        a = np.random.default_rng(int(cfg["a_seed"])).standard_normal(d)
        a *= float(cfg["a_norm"]) / np.linalg.norm(a)
        dist = OracleDisturbance(a, seed=int(cfg["feature_seed"]))
        feats = verify.PerturbedFeatures(dist, float(cfg["delta"]), int(cfg["perturbation_seed"]))
        try:
            gains = Gains(np.broadcast_to(cfg["lam"], 3), np.broadcast_to(cfg["K"], 3),
                          np.broadcast_to(cfg["P"], d))
            pp = PotentialParams(float(cfg["p"]), float(cfg["eps"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if cfg["reference"] != "double_loop":
            raise UsageError("oracle runs use the double_loop reference")
        return cls(cfg, a, dist, feats, gains, pp, double_loop(float(cfg["T"])))

    def controller(self) -> MDController:
        g = self.gains
        return MDController(g.lam, g.K, g.P, self.pp.p, self.pp.eps, self.features, self.a.size)

    def run(self):
        return rollout(PlanarQuadrotor(), self.disturbance, self.controller(), self.ref,
                       float(self.cfg["T"]), float(self.cfg["dt"]))


def cmd_oracle_rollout(args) -> int:
    setup = OracleSetup.from_config(_load_json(args.oracle_config))
    tr = setup.run()
    write_trajectory_csv(args.out, tr)
    print(f"wrote oracle trajectory ({len(tr.t)} samples) to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    setup = OracleSetup.from_config(_load_json(args.oracle_config))
    try:
        tr = read_trajectory_csv(args.trajectory)
    except (OSError, ValueError, StopIteration) as exc:
        raise UsageError(f"cannot read trajectory {args.trajectory}: {exc}") from exc
    if tr.ahat is None or tr.ahat.shape[1] != setup.a.size:
        raise UsageError("trajectory lacks adaptation estimates matching the oracle dimension")
    _, tr.qd_r, _ = setup.ref(tr.t)
    report = verify.stability_report(tr, setup.a, float(setup.cfg["delta"]), setup.gains, setup.pp)
    out = args.out or str(Path(args.trajectory).with_suffix("")) + ".stability.json"
    report.to_json(out)
    allowance = 0.0 if setup.cfg["delta"] == 0 else float(setup.cfg["violation_allowance"])
    ok = report.contained and report.violation_fraction <= allowance
    print(f"violations {report.violations}/{len(report.V)}, radius {report.radius:.6g}, "
          f"entry_time {report.entry_time:.6g}, contained {report.contained} -> {out}")
    if not ok:
        raise VerificationFailed("stability check failed")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the root seed")
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread count (default: ${THREADS_ENV} or library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mdmeta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("collect-data", parents=[common], help="PID rollouts under sampled winds")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_collect_data)

    p = sub.add_parser("fit-ensemble", parents=[common], help="fit one surrogate per task")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_fit_ensemble)

    p = sub.add_parser("meta-train", parents=[common], help="meta-train features, p and gains")
    p.add_argument("--config", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--learn-p", action="store_true", help="learn the potential exponent")
    mode.add_argument("--fixed-p", type=float, default=None, metavar="P",
                      help="freeze the exponent (2.0 gives gradient adaptation)")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", parents=[common], help="tracking RMS on the true drag model")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--winds", default=None, help="comma separated wind speeds")
    p.add_argument("--out", default=None, help="report directory (default: config reports_dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-rollout", parents=[common],
                       help="simulate the synthetic oracle setting used by verify")
    p.add_argument("--oracle-config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_rollout)

    p = sub.add_parser("verify", parents=[common], help="Lyapunov and ultimate-bound checks")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--oracle-config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return None
    if n < 1:
        raise UsageError("thread count must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit(args.threads)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RolloutDiverged, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
