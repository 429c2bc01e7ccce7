import numpy as np
import pytest

from mdmeta.dynamics import OracleDisturbance, PlanarQuadrotor
from mdmeta.reference import double_loop
from mdmeta.simulate import (MDController, RolloutDiverged, Trajectory, check_grid, read_trajectory_csv,
                             rms, rollout, rollouts, simulate_md, task_loss, write_trajectory_csv)


def oracle_case(d=50, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(d)
    a /= np.linalg.norm(a)
    return a, OracleDisturbance(a, seed=1)


def md(features, d, lam=2.0, K=5.0, P=0.1, p=2.0, eps=1e-3):
    return MDController(np.full(3, lam), np.full(3, K), np.full(d, P), p, eps, features, d)


def test_check_grid():
    assert check_grid(1.0, 0.01) == 100
    with pytest.raises(ValueError):
        check_grid(1.0, 0.03)
    with pytest.raises(ValueError):
        check_grid(-1.0, 0.01)


def test_exact_feedforward_without_disturbance():
    a, dist = oracle_case(8)
    zero = OracleDisturbance(np.zeros(8), seed=1)
    # the only error left is RK4 truncation of the reference acceleration, O(dt^4)
    tr = rollout(PlanarQuadrotor(), zero, md(zero.features, 8), double_loop(10.0), 10.0, 0.005)
    assert np.max(np.linalg.norm(tr.error, axis=1)) < 1e-9
    assert np.max(np.abs(tr.ahat)) < 1e-6


def test_oracle_tracking_converges():
    a, dist = oracle_case()
    tr = rollout(PlanarQuadrotor(), dist, md(dist.features, 50), double_loop(10.0), 10.0, 0.02)
    assert np.linalg.norm(tr.error[-1]) < 1e-3
    assert tr.q.shape == (501, 3) and tr.ahat.shape == (501, 50)


def test_rk4_fourth_order():
    a, dist = oracle_case()
    finals = []
    for dt in (0.04, 0.02, 0.01):
        st, _ = simulate_md(PlanarQuadrotor(), dist, md(dist.features, 50), [double_loop(10.0)], 10.0, dt,
                            record=False)
        finals.append(np.concatenate([np.ravel(x) for x in st]))
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    assert 8 <= ratio <= 32


def test_batched_rollouts_match_single():
    a, dist = oracle_case(10)
    refs = [double_loop(4.0), double_loop(4.0, 0.5, 2.0)]
    ctrl = md(dist.features, 10)
    many = rollouts(PlanarQuadrotor(), dist, ctrl, refs, 4.0, 0.02)
    for ref, tr in zip(refs, many):
        one = rollout(PlanarQuadrotor(), dist, ctrl, ref, 4.0, 0.02)
        np.testing.assert_allclose(tr.q, one.q, rtol=1e-12, atol=1e-14)
        assert tr.loss_track == pytest.approx(one.loss_track, rel=1e-12)


def test_divergence_is_reported():
    a, dist = oracle_case(4)
    blowup = lambda q, qd: np.exp(np.abs(qd) * 50)  # noqa: E731
    with pytest.raises(RolloutDiverged) as info:
        rollout(PlanarQuadrotor(), blowup, md(dist.features, 4), double_loop(10.0), 10.0, 0.02)
    assert info.value.time > 0


def _const_traj(offset, T=2.0, dt=0.01, u=None):
    t = dt * np.arange(int(round(T / dt)) + 1)
    q_r = np.zeros((len(t), 3))
    q = q_r + np.asarray(offset)
    u = np.zeros((len(t), 3)) if u is None else u
    e2 = float(np.sum(np.asarray(offset) ** 2))
    return Trajectory(t, q, np.zeros_like(q), u, q_r, np.zeros_like(q), None, e2 * T,
                      float(np.sum(u[0] ** 2)) * T)


def test_task_loss_examples():
    assert task_loss([_const_traj([0, 0, 0])], 0.0) == 0.0
    assert task_loss([_const_traj([1.0, 0, 0])], 0.0) == pytest.approx(1.0)
    u = np.tile([0.0, 9.81, 0.0], (201, 1))
    trs = [_const_traj([0.5, 0, 0], u=u), _const_traj([0.0, 0.2, 0], u=u)]
    mu = 1e-3
    extra = np.mean([tr.loss_ctrl / tr.T for tr in trs])
    assert task_loss(trs, 2 * mu) - task_loss(trs, mu) == pytest.approx(mu * extra, rel=1e-12)
    with pytest.raises(ValueError):
        task_loss([], 0.0)


def test_rms_examples():
    assert rms(_const_traj([0, 0, 0])) == 0.0
    assert rms(_const_traj([0.1, 0, 0])) == pytest.approx(0.01, rel=1e-12)


def test_rollout_integrates_losses():
    a, dist = oracle_case(6)
    tr = rollout(PlanarQuadrotor(), dist, md(dist.features, 6), double_loop(4.0), 4.0, 0.01)
    e2 = np.sum(tr.error ** 2, axis=1)
    u2 = np.sum(tr.u ** 2, axis=1)
    trap = lambda y: float(np.sum(0.5 * (y[1:] + y[:-1])) * tr.dt)  # noqa: E731
    assert tr.loss_track == pytest.approx(trap(e2), rel=1e-3, abs=1e-9)
    assert tr.loss_ctrl == pytest.approx(trap(u2), rel=1e-4)


def test_trajectory_csv_roundtrip(tmp_path):
    a, dist = oracle_case(4)
    tr = rollout(PlanarQuadrotor(), dist, md(dist.features, 4), double_loop(2.0), 2.0, 0.02)
    write_trajectory_csv(tmp_path / "tr.csv", tr)
    back = read_trajectory_csv(tmp_path / "tr.csv")
    for name in ("t", "q", "qd", "u", "q_r", "ahat"):
        assert np.array_equal(getattr(back, name), getattr(tr, name)), name
