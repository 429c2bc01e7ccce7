"""Fixed-step RK4 closed-loop rollouts, loss integrals and tracking metrics.

The integrator works on batches: every state array has shape (B, n) and all
B rollouts advance together. When the controller or disturbance carries tape
``Var``s, the whole unrolled recursion is recorded and can be differentiated.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffengine as ad
from .controller import PidGains, adaptation_rhs_smooth, md_control, pid_force
from .dynamics import ManipulatorModel
from .potential import hess_coeffs
from .reference import RefTrajectory

DIVERGENCE_LIMIT = 1e6


class RolloutDiverged(FloatingPointError):
    def __init__(self, time: float, detail: str = ""):
        super().__init__(f"rollout diverged at t={time:.4f}s {detail}".rstrip())
        self.time = time


@dataclass
class MDController:
    """Gains, potential exponent and feature map of the adaptive controller.

    Any field may be a tape ``Var``. ``features(q, qd)`` returns (..., n, d).
    """

    lam: object
    K: object
    P: object
    p: object
    eps: float
    features: Callable
    d: int


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    q_r: np.ndarray
    qd_r: np.ndarray
    ahat: np.ndarray | None = None
    loss_track: float = 0.0
    loss_ctrl: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def error(self) -> np.ndarray:
        return self.q - self.q_r

    def loss(self, mu_ctrl: float) -> float:
        return (self.loss_track + mu_ctrl * self.loss_ctrl) / self.T


def check_grid(T: float, dt: float) -> int:
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


@dataclass
class RefTable:
    """Reference values at the RK4 stage times of every step, per batch row."""

    full: tuple  # each (nsteps+1, B, n) at t_k
    half: tuple  # each (nsteps, B, n) at t_k + dt/2

    @classmethod
    def build(cls, refs: Sequence[RefTrajectory], dt: float, nsteps: int) -> "RefTable":
        t = dt * np.arange(nsteps + 1)
        th = t[:-1] + 0.5 * dt
        full = [ref(t) for ref in refs]
        half = [ref(th) for ref in refs]
        f = tuple(np.stack([r[i] for r in full], axis=1) for i in range(3))
        h = tuple(np.stack([r[i] for r in half], axis=1) for i in range(3))
        return cls(f, h)

    def at(self, k: int, stage: int):
        if stage == 0:
            return tuple(a[k] for a in self.full)
        if stage == 3:
            return tuple(a[k + 1] for a in self.full)
        return tuple(a[k] for a in self.half)


def _finite_guard(arrays, time):
    for a in arrays:
        v = ad.value_of(a)
        if not np.all(np.isfinite(v)):
            raise RolloutDiverged(time, "(non-finite state)")
        if np.max(np.abs(v)) > DIVERGENCE_LIMIT:
            raise RolloutDiverged(time, "(state exceeded 1e6)")


def md_derivative(model, disturbance, ctrl: MDController, q, qd, a, ref_t, coeffs=None):
    Y = ctrl.features(q, qd)
    u, s = md_control(model, q, qd, ref_t, a, ctrl.lam, ctrl.K, Y)
    qdd = model.accel(q, qd, u, disturbance(q, qd))
    adot = adaptation_rhs_smooth(a, s, Y, ctrl.P, ctrl.p, ctrl.eps, coeffs)
    e = q - ref_t[0]
    return (qd, qdd, adot, ad.sum_(e * e, axis=-1), ad.sum_(u * u, axis=-1)), u


def rk4(deriv: Callable, state: tuple, dt: float, refs: tuple):
    """One classical RK4 step for a tuple-valued state; refs = stage inputs."""
    k1, out = deriv(state, refs[0])
    k2, _ = deriv(tuple(ad.axpy(x, k, 0.5 * dt) for x, k in zip(state, k1)), refs[1])
    k3, _ = deriv(tuple(ad.axpy(x, k, 0.5 * dt) for x, k in zip(state, k2)), refs[2])
    k4, _ = deriv(tuple(ad.axpy(x, k, dt) for x, k in zip(state, k3)), refs[3])
    new = tuple(ad.rk4_combine(x, a, b, c, d, dt) for x, a, b, c, d in zip(state, k1, k2, k3, k4))
    return new, out


def simulate_md(model: ManipulatorModel, disturbance: Callable, ctrl: MDController,
                refs: Sequence[RefTrajectory], T: float, dt: float, a0=None,
                record: bool = True, x0=None):
    """Batched MD closed loop over ``len(refs)`` rollouts.

    Returns (final_state, samples) where final_state = (q, qd, ahat, loss_track,
    loss_ctrl) possibly as Vars, and samples holds per-step numpy records (or
    None when ``record`` is False). Starts on the reference (q = q_r, qd = qd_r)
    unless ``x0 = (q0, qd0)`` is given.
    """
    nsteps = check_grid(T, dt)
    B = len(refs)
    table = RefTable.build(refs, dt, nsteps)
    q = table.full[0][0].copy()
    qd = table.full[1][0].copy()
    if x0 is not None:
        q = np.broadcast_to(np.asarray(x0[0], float), q.shape).copy()
        qd = np.broadcast_to(np.asarray(x0[1], float), qd.shape).copy()
    a = np.zeros((B, ctrl.d)) if a0 is None else np.broadcast_to(np.asarray(a0, float), (B, ctrl.d)).copy()
    state = (q, qd, a, np.zeros(B), np.zeros(B))
    coeffs = hess_coeffs(ctrl.p)

    def deriv(st, ref_t):
        return md_derivative(model, disturbance, ctrl, st[0], st[1], st[2], ref_t, coeffs)

    samples = None
    if record:
        samples = {"q": [], "qd": [], "ahat": [], "u": []}
    for k in range(nsteps):
        refs4 = tuple(table.at(k, i) for i in range(4))
        new, u = rk4(deriv, state, dt, refs4)
        if record:
            samples["q"].append(ad.value_of(state[0]))
            samples["qd"].append(ad.value_of(state[1]))
            samples["ahat"].append(ad.value_of(state[2]))
            samples["u"].append(ad.value_of(u))
        state = new
        _finite_guard(state[:3], (k + 1) * dt)
    if record:
        # control at the final sample time
        _, u_end = deriv(state, table.at(nsteps - 1, 3))
        samples["q"].append(ad.value_of(state[0]))
        samples["qd"].append(ad.value_of(state[1]))
        samples["ahat"].append(ad.value_of(state[2]))
        samples["u"].append(ad.value_of(u_end))
        samples = {k: np.stack(v, axis=1) for k, v in samples.items()}
        samples["q_r"] = np.swapaxes(table.full[0], 0, 1)
        samples["qd_r"] = np.swapaxes(table.full[1], 0, 1)
        samples["t"] = dt * np.arange(nsteps + 1)
    return state, samples


def rollout(model: ManipulatorModel, disturbance: Callable, ctrl: MDController,
            ref: RefTrajectory, T: float, dt: float, a0=None, meta: dict | None = None,
            x0=None) -> Trajectory:
    """Single numpy rollout of the MD adaptive closed loop."""
    state, smp = simulate_md(model, disturbance, ctrl, [ref], T, dt, a0, x0=x0)
    return Trajectory(smp["t"], smp["q"][0], smp["qd"][0], smp["u"][0], smp["q_r"][0],
                      smp["qd_r"][0], smp["ahat"][0], float(state[3][0]), float(state[4][0]),
                      dict(meta or {}))


def rollouts(model, disturbance, ctrl, refs, T, dt, a0=None, meta=None) -> list[Trajectory]:
    state, smp = simulate_md(model, disturbance, ctrl, refs, T, dt, a0)
    return [Trajectory(smp["t"], smp["q"][b], smp["qd"][b], smp["u"][b], smp["q_r"][b],
                       smp["qd_r"][b], smp["ahat"][b], float(state[3][b]), float(state[4][b]),
                       dict(meta or {}))
            for b in range(len(refs))]


def rollout_pid(model, disturbance: Callable, ref: RefTrajectory, T: float, dt: float,
                gains: PidGains = PidGains(), meta: dict | None = None) -> Trajectory:
    """PID closed loop (integral of the error as extra RK4 state)."""
    nsteps = check_grid(T, dt)
    table = RefTable.build([ref], dt, nsteps)
    q = table.full[0][0].copy()
    qd = table.full[1][0].copy()
    z = np.zeros_like(q)
    state = (q, qd, z, np.zeros(1), np.zeros(1))

    def deriv(st, ref_t):
        q, qd, z = st[0], st[1], st[2]
        u = pid_force(q, qd, ref_t, gains, z, model)
        qdd = model.accel(q, qd, u, disturbance(q, qd))
        e = q - ref_t[0]
        return (qd, qdd, e, np.sum(e * e, axis=-1), np.sum(u * u, axis=-1)), u

    qs, qds, us = [], [], []
    for k in range(nsteps):
        refs4 = tuple(table.at(k, i) for i in range(4))
        new, u = rk4(deriv, state, dt, refs4)
        qs.append(state[0][0]), qds.append(state[1][0]), us.append(u[0])
        state = new
        _finite_guard(state[:3], (k + 1) * dt)
    _, u_end = deriv(state, table.at(nsteps - 1, 3))
    qs.append(state[0][0]), qds.append(state[1][0]), us.append(u_end[0])
    return Trajectory(dt * np.arange(nsteps + 1), np.array(qs), np.array(qds), np.array(us),
                      table.full[0][:, 0], table.full[1][:, 0], None,
                      float(state[3][0]), float(state[4][0]), dict(meta or {}))


def task_loss(trajectories: Sequence[Trajectory], mu_ctrl: float) -> float:
    """Mean over rollouts of (1/T) int(||e||^2 + mu ||u||^2) dt."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    return float(np.mean([tr.loss(mu_ctrl) for tr in trajectories]))


def rms(trajectory: Trajectory) -> float:
    """(1/N) sum_k ||q(k dt) - q_r(k dt)||^2 over samples k = 1..N.

    Reported under the name RMS although no square root is taken.
    """
    e = trajectory.error[1:]
    return float(np.mean(np.sum(e * e, axis=1)))


def trajectory_header(d: int) -> list[str]:
    cols = ["t", "x", "y", "phi", "xdot", "ydot", "phidot", "xr", "yr", "phir", "u1", "u2", "u3"]
    return cols + [f"ahat_{i + 1}" for i in range(d)]


def write_trajectory_csv(path, tr: Trajectory):
    d = 0 if tr.ahat is None else tr.ahat.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(trajectory_header(d))
        for k in range(len(tr.t)):
            row = [tr.t[k], *tr.q[k], *tr.qd[k], *tr.q_r[k], *tr.u[k]]
            if d:
                row.extend(tr.ahat[k])
            wr.writerow([f"{float(v):.17g}" for v in row])


def read_trajectory_csv(path) -> Trajectory:
    with open(path) as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = np.array([[float(v) for v in row] for row in rd])
    d = len(header) - 13
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 10:13], data[:, 7:10],
                      np.full_like(data[:, 1:4], np.nan), data[:, 13:] if d else None)
