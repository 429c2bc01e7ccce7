"""Surrogate disturbance models fitted to PID-collected trajectories.

Each task's wind speed is used only to generate its data; the fitted network
sees states and controls, never w.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad
from .controller import PidGains, pid_control
from .dynamics import PlanarQuadrotor, WindDrag
from .features import MlpParams, init_mlp, split_flat, surrogate_net
from .reference import ConstantReference, RefTrajectory, random_spline_reference
from .simulate import RolloutDiverged, Trajectory, check_grid, rk4

log = logging.getLogger(__name__)

SURROGATE_ARCH = (6, 32, 32, 3)


@dataclass
class TrajectoryDataset:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    w: float | None = None
    seed: int | None = None
    q_r: np.ndarray | None = None

    def __post_init__(self):
        if len(self.t) < 2:
            raise ValueError("a dataset needs at least two samples")
        if not (len(self.t) == len(self.q) == len(self.qd) == len(self.u)):
            raise ValueError("inconsistent sample counts")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def to_trajectory(self) -> Trajectory:
        q_r = self.q_r if self.q_r is not None else np.zeros_like(self.q)
        return Trajectory(self.t, self.q, self.qd, self.u, q_r, np.zeros_like(self.q), None,
                          meta={"w": self.w, "seed": self.seed})

    @classmethod
    def from_trajectory(cls, tr: Trajectory, w=None, seed=None) -> "TrajectoryDataset":
        return cls(tr.t, tr.q, tr.qd, tr.u, w, seed, tr.q_r)


def collect_trajectory(w: float, seed, T_e: float = 10.0, dt: float = 0.02,
                       ref: RefTrajectory | None = None, gains: PidGains = PidGains(),
                       step_scale: float = 0.5, disturbance=None) -> TrajectoryDataset:
    """Sampled-data PID tracking of a random-walk spline under wind drag.

    The control is computed at each sample and held over the step, so the
    recorded u^(k) is exactly the input applied on [k dt, (k+1) dt).
    ``disturbance`` replaces the wind drag when given.
    """
    nsteps = check_grid(T_e, dt)
    model = PlanarQuadrotor()
    drag = WindDrag(w=w) if disturbance is None else disturbance
    if ref is None:
        ref = random_spline_reference(seed, T_e, 1.0, step_scale)
    t = dt * np.arange(nsteps + 1)
    qr, qdr, qddr = ref(t)
    q = qr[0].copy()
    qd = qdr[0].copy()
    integral = np.zeros(3)
    qs, qds, us = [q], [qd], []
    for k in range(nsteps):
        u, integral = pid_control(q, qd, (qr[k], qdr[k], qddr[k]), gains, integral, dt, model)
        q, qd = zoh_step(model, drag, q, qd, u, dt)
        if not (np.all(np.isfinite(q)) and np.max(np.abs(np.concatenate([q, qd]))) < 1e6):
            raise RolloutDiverged((k + 1) * dt)
        qs.append(q)
        qds.append(qd)
        us.append(u)
    u_last, _ = pid_control(q, qd, (qr[-1], qdr[-1], qddr[-1]), gains, integral, dt, model)
    us.append(u_last)
    return TrajectoryDataset(t, np.array(qs), np.array(qds), np.array(us), float(w), seed, qr)


def zoh_step(model, disturbance, q, qd, u, dt):
    """RK4 over one step with u held constant; works batched and on tapes."""

    def deriv(st, _):
        return (st[1], model.accel(st[0], st[1], u, disturbance(st[0], st[1]))), None

    (q1, qd1), _ = rk4(deriv, (q, qd), dt, (None,) * 4)
    return q1, qd1


def transitions(dataset: TrajectoryDataset):
    """(q_k, qd_k, u_k, q_k+1, qd_k+1) stacked over k."""
    return dataset.q[:-1], dataset.qd[:-1], dataset.u[:-1], dataset.q[1:], dataset.qd[1:]


def one_step_program(dataset: TrajectoryDataset, architecture=SURROGATE_ARCH):
    """program(flat xi) -> mean squared one-step prediction error."""
    return transition_program(transitions(dataset), dataset.dt, architecture)


def transition_program(trans, dt: float, architecture=SURROGATE_ARCH):
    model = PlanarQuadrotor()
    q0, qd0, u0, q1, qd1 = trans
    count = len(q0)

    def program(flat):
        Ws, bs = split_flat(flat, architecture)

        def fhat(q, qd):
            return surrogate_net(Ws, bs, q, qd)

        qp, qdp = zoh_step(model, fhat, q0, qd0, u0, dt)
        eq = qp - q1
        ev = qdp - qd1
        return (ad.sum_(eq * eq) + ad.sum_(ev * ev)) * (1.0 / count)
    return program


def one_step_loss(xi: MlpParams, dataset: TrajectoryDataset) -> float:
    return float(one_step_program(dataset, xi.architecture)(xi.flatten()))


@dataclass
class FitConfig:
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class FitResult:
    params: MlpParams
    best_loss: float
    baseline_loss: float
    history: list = field(default_factory=list)


def fit_surrogate(dataset: TrajectoryDataset, seed, config: FitConfig = FitConfig(),
                  architecture=SURROGATE_ARCH) -> FitResult:
    """Adam on the one-step loss (full-trajectory batch); keeps the best iterate."""
    init = init_mlp(seed, architecture)
    program = one_step_program(dataset, architecture)
    baseline = float(program(np.zeros(init.size)))
    x = init.flatten()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best, best_x = np.inf, x.copy()
    history = []
    for t in range(1, config.steps + 1):
        loss, g = ad.value_and_grad(program, x)
        if not np.isfinite(loss):
            raise FloatingPointError(f"surrogate loss became non-finite at step {t}")
        history.append(loss)
        if loss < best:
            best, best_x = loss, x.copy()
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        mhat = m / (1 - config.beta1 ** t)
        vhat = v / (1 - config.beta2 ** t)
        x = x - config.lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    final = float(program(x))
    if final < best:
        best, best_x = final, x.copy()
    params = MlpParams.unflatten(best_x, architecture, seed if isinstance(seed, int) else None)
    return FitResult(params, float(best), baseline, history)


def stationary_dataset(w: float, T_e: float = 10.0, dt: float = 0.02) -> TrajectoryDataset:
    return collect_trajectory(w, None, T_e, dt, ref=ConstantReference(T=T_e))
