"""Bi-level meta-training of features, potential exponent and gains.

The outer problem is plain gradient-based optimization of the flattened raw
parameter vector; the inner "learner" is the adaptive controller itself,
simulated in closed loop against the surrogate disturbance of each task.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffengine as ad
from .dynamics import PlanarQuadrotor, WindDrag
from .features import MlpParams, feature_net, init_mlp, param_count, split_flat, stack_params, surrogate_net
from .potential import P_MARGIN, DEFAULT_EPS
from .reference import random_spline_reference
from .simulate import MDController, RolloutDiverged, simulate_md

log = logging.getLogger(__name__)

W_MAX = 6.0
BETA_A = 5.0
BETA_B = 9.0
DIVERGED_LOSS = 1e3


def sample_tasks(seed, M: int) -> np.ndarray:
    """Wind speeds w = 6 xi with xi ~ Beta(5, 9)."""
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = np.random.default_rng(seed)
    return W_MAX * rng.beta(BETA_A, BETA_B, size=M)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def decode_p(raw_p):
    return ad.add(1.0 + P_MARGIN, ad.softplus(raw_p))


def encode_p(p: float) -> float:
    """Raw value whose decoded exponent equals ``p`` exactly when reachable."""
    if p <= 1.0 + P_MARGIN:
        raise ValueError("p must exceed 1 + margin")
    raw = inv_softplus(p - 1.0 - P_MARGIN)
    # nudge by ulps so the round trip is exact
    for _ in range(64):
        got = float(decode_p(raw))
        if got == p:
            break
        raw = np.nextafter(raw, np.inf if got < p else -np.inf)
    return float(raw)


@dataclass
class Layout:
    """Offsets of each block inside the flat raw vector [theta_Y, raw_p, lam, K, P]."""

    architecture: tuple
    n: int = 3
    d: int = 10

    @property
    def n_theta(self) -> int:
        return param_count(self.architecture)

    @property
    def slices(self) -> dict:
        k = self.n_theta
        return {
            "theta": slice(0, k),
            "p": slice(k, k + 1),
            "lam": slice(k + 1, k + 1 + self.n),
            "K": slice(k + 1 + self.n, k + 1 + 2 * self.n),
            "P": slice(k + 1 + 2 * self.n, k + 1 + 2 * self.n + self.d),
        }

    @property
    def size(self) -> int:
        return self.n_theta + 1 + 2 * self.n + self.d


@dataclass
class MetaParams:
    theta: MlpParams
    raw_p: float
    raw_lam: np.ndarray
    raw_K: np.ndarray
    raw_P: np.ndarray

    @property
    def d(self) -> int:
        return self.raw_P.size

    @property
    def layout(self) -> Layout:
        return Layout(self.theta.architecture, self.raw_lam.size, self.d)

    @property
    def p(self) -> float:
        return float(decode_p(self.raw_p))

    def gains(self):
        return np.exp(self.raw_lam), np.exp(self.raw_K), np.exp(self.raw_P)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.theta.flatten(), [self.raw_p], self.raw_lam, self.raw_K, self.raw_P])

    @classmethod
    def unflatten(cls, flat, layout: Layout, seed=None) -> "MetaParams":
        flat = np.asarray(flat, dtype=float)
        sl = layout.slices
        theta = MlpParams.unflatten(flat[sl["theta"]], layout.architecture, seed)
        return cls(theta, float(flat[sl["p"]][0]), flat[sl["lam"]].copy(),
                   flat[sl["K"]].copy(), flat[sl["P"]].copy())

    def to_dict(self, frozen_p: float | None = None) -> dict:
        doc = self.theta.to_dict(d=self.d)
        doc.update({
            "raw_p": self.raw_p,
            "p": frozen_p if frozen_p is not None else self.p,
            "frozen_p": frozen_p,
            "raw_lam": self.raw_lam.tolist(),
            "raw_K": self.raw_K.tolist(),
            "raw_P": self.raw_P.tolist(),
        })
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> tuple["MetaParams", float | None]:
        theta = MlpParams.from_dict(doc)
        mp = cls(theta, float(doc["raw_p"]), np.asarray(doc["raw_lam"], float),
                 np.asarray(doc["raw_K"], float), np.asarray(doc["raw_P"], float))
        return mp, doc.get("frozen_p")


def feature_architecture(d: int, hidden=(32, 32), n: int = 3) -> tuple:
    return (2 * n, *hidden, n * d)


def init_meta_params(seed, d: int = 10, hidden=(32, 32), p_init: float = 2.0,
                     lam0: float = 2.0, K0: float = 5.0, P0: float = 1.0,
                     spread: float = 0.1) -> MetaParams:
    """Random network and gains near (lam0, K0, P0); decoded p equals p_init."""
    rng = np.random.default_rng(seed)
    theta = init_mlp(rng, feature_architecture(d, hidden))
    theta.seed = int(seed) if isinstance(seed, (int, np.integer)) else None
    raw_lam = np.log(lam0) + spread * rng.standard_normal(3)
    raw_K = np.log(K0) + spread * rng.standard_normal(3)
    raw_P = np.log(P0) + spread * rng.standard_normal(d)
    return MetaParams(theta, encode_p(p_init), raw_lam, raw_K, raw_P)


@dataclass
class TaskSet:
    """One surrogate (or true wind) per task and N references per task."""

    winds: np.ndarray
    surrogates: list | None
    refs: list  # refs[j] is a list of N references
    T: float

    @property
    def M(self) -> int:
        return len(self.winds)

    @property
    def N(self) -> int:
        return len(self.refs[0])


def make_references(seed, M: int, N: int, T: float, spacing: float = 1.0,
                    step_scale: float = 0.5) -> list:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(M * N)
    return [[random_spline_reference(children[j * N + i], T, spacing, step_scale) for i in range(N)]
            for j in range(M)]


def batched_disturbance(tasks: TaskSet, true_dynamics: bool = False):
    """Callable on (M*N, n) states applying task j's model to rows j*N..j*N+N-1."""
    N = tasks.N
    if true_dynamics or tasks.surrogates is None:
        w = np.repeat(np.asarray(tasks.winds, float), N)
        return WindDrag(w=w)
    Ws, bs = stack_params(tasks.surrogates)
    Ws = [np.repeat(W, N, axis=0) for W in Ws]
    bs = [np.repeat(b, N, axis=0) for b in bs]

    def dist(q, qd):
        return surrogate_net(Ws, bs, q, qd)
    return dist


def controller_from_flat(flat, layout: Layout, eps: float, frozen_p: float | None = None) -> MDController:
    sl = layout.slices
    Ws, bs = split_flat(ad.take(flat, sl["theta"]), layout.architecture)
    p = frozen_p if frozen_p is not None else decode_p(ad.take(flat, sl["p"]))
    if isinstance(p, ad.Var):
        p = ad.reshape(p, ())
    elif not np.isscalar(p):
        p = float(np.asarray(p).reshape(()))
    lam = ad.exp(ad.take(flat, sl["lam"]))
    K = ad.exp(ad.take(flat, sl["K"]))
    P = ad.exp(ad.take(flat, sl["P"]))

    def features(q, qd):
        return feature_net(Ws, bs, q, qd, layout.d, layout.n)
    return MDController(lam, K, P, p, eps, features, layout.d)


@dataclass
class LossConfig:
    mu_ctrl: float = 1e-3
    mu_meta: float = 1e-4
    dt: float = 0.01
    eps: float = DEFAULT_EPS
    frozen_p: float | None = None
    true_dynamics: bool = False


def meta_loss_program(tasks: TaskSet, layout: Layout, cfg: LossConfig):
    """Return program(flat) -> meta loss, usable with arrays or tape Vars."""
    model = PlanarQuadrotor()
    dist = batched_disturbance(tasks, cfg.true_dynamics)
    refs = [r for rs in tasks.refs for r in rs]
    M, N = tasks.M, tasks.N

    def program(flat):
        ctrl = controller_from_flat(flat, layout, cfg.eps, cfg.frozen_p)
        state, _ = simulate_md(model, dist, ctrl, refs, tasks.T, cfg.dt, record=False)
        per_rollout = (state[3] + cfg.mu_ctrl * state[4]) * (1.0 / tasks.T)
        # mean over N within each task, then over tasks: equal weights, so one mean
        task_term = ad.sum_(per_rollout) * (1.0 / (M * N))
        return task_term + cfg.mu_meta * ad.sum_(flat * flat)
    return program


def task_losses(flat, tasks: TaskSet, layout: Layout, cfg: LossConfig) -> np.ndarray:
    """Per-task l_j (numpy) for reporting."""
    model = PlanarQuadrotor()
    dist = batched_disturbance(tasks, cfg.true_dynamics)
    refs = [r for rs in tasks.refs for r in rs]
    ctrl = controller_from_flat(np.asarray(flat, float), layout, cfg.eps, cfg.frozen_p)
    state, _ = simulate_md(model, dist, ctrl, refs, tasks.T, cfg.dt, record=False)
    per = (state[3] + cfg.mu_ctrl * state[4]) / tasks.T
    return per.reshape(tasks.M, tasks.N).mean(axis=1)


def meta_loss(flat, tasks: TaskSet, layout: Layout, cfg: LossConfig) -> float:
    try:
        return float(meta_loss_program(tasks, layout, cfg)(np.asarray(flat, float)))
    except RolloutDiverged as exc:
        log.warning("meta_loss: %s", exc)
        return DIVERGED_LOSS


def meta_value_and_grad(flat, tasks: TaskSet, layout: Layout, cfg: LossConfig):
    """(loss, gradient); on divergence returns the guard value and a zero gradient."""
    program = meta_loss_program(tasks, layout, cfg)
    try:
        return ad.value_and_grad(program, flat)
    except (RolloutDiverged, ad.NonFiniteError) as exc:
        log.warning("meta gradient unavailable: %s", exc)
        return DIVERGED_LOSS, np.zeros_like(np.asarray(flat, float))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def meta_step(flat, grad, opt: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, mask=None):
    """Adam update of the flat raw vector; non-finite gradients skip the step."""
    flat = np.asarray(flat, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if flat.shape != grad.shape or opt.m.shape != flat.shape:
        raise ValueError("shape mismatch between parameters, gradient and optimizer state")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite meta gradient; step skipped")
        return flat.copy(), opt
    if mask is not None:
        grad = grad * mask
    t = opt.t + 1
    m = beta1 * opt.m + (1 - beta1) * grad
    v = beta2 * opt.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    step = lr * mhat / (np.sqrt(vhat) + eps)
    if mask is not None:
        step = step * mask
    return flat - step, AdamState(m, v, t)


@dataclass
class TrainConfig:
    seed: int = 0
    M: int = 10
    N: int = 5
    T: float = 5.0
    dt: float = 0.01
    mu_ctrl: float = 1e-3
    mu_meta: float = 1e-4
    steps: int = 500
    lr: float = 1e-3
    d: int = 10
    learn_p: bool = True
    p_init: float = 2.0
    epsilon: float = DEFAULT_EPS
    architecture: tuple = (32, 32)
    true_dynamics: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        if "architecture" in known:
            known["architecture"] = tuple(known["architecture"])
        return cls(**known)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["architecture"] = list(self.architecture)
        return out


@dataclass
class TrainResult:
    params: MetaParams
    frozen_p: float | None
    history: list = field(default_factory=list)  # (step, loss, p, min_gain, max_gain)
    best_loss: float = np.inf
    best_source: str = "own"


def _gain_range(flat, layout: Layout):
    sl = layout.slices
    g = np.exp(np.concatenate([flat[sl["lam"]], flat[sl["K"]], flat[sl["P"]]]))
    return float(g.min()), float(g.max())


def train(config: TrainConfig, tasks: TaskSet, init: MetaParams | None = None,
          candidates: list | None = None, progress=None) -> TrainResult:
    """Adam on the meta loss over all tasks per step.

    The returned parameters are the best iterate seen (by the loss evaluated
    at that iterate). ``candidates`` are extra flat vectors (for instance the
    fixed-p run's iterates, embedded with their p) that compete for "best".
    With ``learn_p`` off the exponent stays at ``p_init`` exactly.
    """
    if init is None:
        init = init_meta_params(config.seed, config.d, config.architecture, config.p_init)
    layout = init.layout
    frozen_p = None if config.learn_p else float(config.p_init)
    cfg = LossConfig(config.mu_ctrl, config.mu_meta, config.dt, config.epsilon, frozen_p,
                     config.true_dynamics)
    flat = init.flatten()
    mask = np.ones_like(flat)
    if frozen_p is not None:
        mask[layout.slices["p"]] = 0.0
    opt = AdamState.zeros(flat.size)
    best, best_flat, best_source = np.inf, flat.copy(), "own"
    history = []
    for step in range(config.steps + 1):
        loss, grad = meta_value_and_grad(flat, tasks, layout, cfg)
        p_now = frozen_p if frozen_p is not None else float(decode_p(flat[layout.slices["p"]][0]))
        gmin, gmax = _gain_range(flat, layout)
        history.append((step, loss, p_now, gmin, gmax))
        if loss < best:
            best, best_flat = loss, flat.copy()
        if progress is not None:
            progress(step, loss, p_now)
        if step == config.steps:
            break
        flat, opt = meta_step(flat, grad, opt, config.lr, mask=mask)
    for k, cand in enumerate(candidates or []):
        cand = np.asarray(cand, float)
        loss = meta_loss(cand, tasks, layout, cfg)
        if loss < best:
            best, best_flat, best_source = loss, cand.copy(), f"candidate{k}"
    params = MetaParams.unflatten(best_flat, layout, init.theta.seed)
    return TrainResult(params, frozen_p, history, float(best), best_source)
