import csv
import json
import shutil

import pytest

from mdmeta.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main

TINY = {"seed": 3, "M": 2, "N": 1, "T": 1.0, "dt": 0.02, "steps": 3, "lr": 1e-2, "d": 4, "architecture": [8, 8],
        "fit": {"steps": 50}, "data": {"T_e": 4.0},
        "evaluation": {"wind_speeds": [2, 8], "T_eval": 2.0, "dt_eval": 0.02}}


def run_pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = str(cfg)
    assert main(["collect-data", "--config", c]) == EXIT_OK
    assert main(["fit-ensemble", "--config", c]) == EXIT_OK
    assert main(["meta-train", "--config", c, "--fixed-p", "2.0"]) == EXIT_OK
    assert main(["meta-train", "--config", c, "--learn-p"]) == EXIT_OK
    models = root / "models"
    assert main(["evaluate", "--config", c, "--checkpoint", str(models / "checkpoint_fixed_p2.json"),
                 "--checkpoint", str(models / "checkpoint_learn_p.json")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run") / "a")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_manifest(pipeline):
    doc = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert len(doc["tasks"]) == TINY["M"]
    for task in doc["tasks"]:
        assert 0.0 <= task["w"] <= 6.0
        assert (pipeline / "data" / task["file"]).exists()
    assert doc["root_seed"] == 3


def test_checkpoints_and_histories(pipeline):
    fixed = json.loads((pipeline / "models" / "checkpoint_fixed_p2.json").read_text())
    assert fixed["p"] == 2.0
    learned = json.loads((pipeline / "models" / "checkpoint_learn_p.json").read_text())
    assert learned["best_loss"] <= fixed["best_loss"] + 1e-6
    for tag in ("fixed_p2", "learn_p"):
        rows = _rows(pipeline / "reports" / f"history_{tag}.csv")
        assert list(rows[0]) == ["step", "meta_loss", "decoded_p", "min_gain", "max_gain"]
        # step 0 is the initial iterate, then one row after each update
        assert [int(r["step"]) for r in rows] == list(range(TINY["steps"] + 1))
    assert all(float(r["decoded_p"]) == 2.0 for r in _rows(pipeline / "reports" / "history_fixed_p2.csv"))


def test_evaluation_reports(pipeline):
    rep = pipeline / "reports"
    rows = _rows(rep / "evaluation_fixed_p2.csv")
    assert [float(r["w"]) for r in rows] == [2.0, 8.0]
    assert [r["in_distribution"] for r in rows] == ["1", "0"]
    comp = _rows(rep / "comparison.csv")
    assert set(comp[0]) == {"w", "in_distribution", "rms_fixed_p2", "rms_learn_p"}
    svg = (rep / "phase_fixed_p2.svg").read_text()
    assert "reference" in svg


def test_pipeline_is_deterministic(pipeline, tmp_path):
    other = run_pipeline(tmp_path / "b")
    for sub in ("data", "models", "reports"):
        names = sorted(p.name for p in (pipeline / sub).iterdir())
        assert names == sorted(p.name for p in (other / sub).iterdir())
        for name in names:
            assert (pipeline / sub / name).read_bytes() == (other / sub / name).read_bytes(), name


def test_meta_train_rejects_wrong_manifest(pipeline, tmp_path):
    root = tmp_path / "c"
    shutil.copytree(pipeline, root)
    cfg = json.loads((root / "cfg.json").read_text())
    cfg["M"] = 3
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["meta-train", "--config", str(root / "cfg.json"), "--fixed-p", "2"]) == EXIT_USAGE


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["meta-train"])
    assert info.value.code == EXIT_USAGE
    assert main(["collect-data", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"M": 0}))
    assert main(["collect-data", "--config", str(bad)]) == EXIT_USAGE
    odd = tmp_path / "odd.json"
    odd.write_text(json.dumps({"bogus": 1}))
    assert main(["oracle-rollout", "--oracle-config", str(odd), "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE


def test_numeric_failure_exit_code(tmp_path):
    oc = tmp_path / "oracle.json"
    # an absurd adaptation rate on a large disturbance drives the rollout past the divergence guard
    oc.write_text(json.dumps({"d": 4, "a_norm": 1e4, "P": 1e-6, "K": 0.01, "lam": 0.01, "T": 2.0, "dt": 0.05}))
    assert main(["oracle-rollout", "--oracle-config", str(oc), "--out", str(tmp_path / "t.csv")]) == EXIT_NUMERIC


def test_oracle_verify_roundtrip(tmp_path):
    oc = tmp_path / "oracle.json"
    oc.write_text(json.dumps({"delta": 0.1}))
    traj = tmp_path / "traj.csv"
    assert main(["oracle-rollout", "--oracle-config", str(oc), "--out", str(traj)]) == EXIT_OK
    assert main(["verify", "--trajectory", str(traj), "--oracle-config", str(oc)]) == EXIT_OK
    rep = json.loads((tmp_path / "traj.stability.json").read_text())
    assert rep["contained"] and rep["radius"] == pytest.approx(0.01, rel=1e-8)
    assert rep["entry_time"] is not None
    # claiming a tiny feature error makes the same run fail containment
    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps({"delta": 1e-6}))
    assert main(["verify", "--trajectory", str(traj), "--oracle-config", str(strict),
                 "--out", str(tmp_path / "s.json")]) == EXIT_VERIFY
