"""Twice-differentiable reference trajectories q_r(t)."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline


class RefTrajectory:
    """Query interface t -> (q_r, qd_r, qdd_r); vectorized over t."""

    T: float

    def __call__(self, t):
        raise NotImplementedError

    def sample(self, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self(np.asarray(times, dtype=float))


class SplineReference(RefTrajectory):
    def __init__(self, times, waypoints):
        times = np.asarray(times, dtype=float)
        waypoints = np.asarray(waypoints, dtype=float)
        if len(times) < 2:
            raise ValueError("need at least two waypoints")
        if np.any(np.diff(times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        self.times = times
        self.waypoints = waypoints
        self.T = float(times[-1] - times[0])
        self._spline = CubicSpline(times, waypoints, axis=0, bc_type="natural")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)

    def __call__(self, t):
        return self._spline(t), self._d1(t), self._d2(t)


@dataclass(frozen=True)
class DoubleLoop(RefTrajectory):
    """Circle of radii (A, B) traversed twice over [0, T], starting at the origin."""

    T: float = 10.0
    A: float = 1.0
    B: float = 1.0

    def __post_init__(self):
        if min(self.T, self.A, self.B) <= 0:
            raise ValueError("T, A and B must be positive")

    @property
    def omega(self) -> float:
        return 4 * np.pi / self.T

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        w = self.omega
        s, c = np.sin(w * t), np.cos(w * t)
        z = np.zeros_like(t)
        q = np.stack([self.A * s, self.B * (1 - c), z], axis=-1)
        qd = np.stack([self.A * w * c, self.B * w * s, z], axis=-1)
        qdd = np.stack([-self.A * w * w * s, self.B * w * w * c, z], axis=-1)
        return q, qd, qdd


@dataclass(frozen=True)
class ConstantReference(RefTrajectory):
    point: tuple = (0.0, 0.0, 0.0)
    T: float = 10.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        q = np.broadcast_to(np.asarray(self.point, dtype=float), t.shape + (3,)).copy()
        return q, np.zeros_like(q), np.zeros_like(q)


def random_walk_waypoints(seed, count: int, step_scale: float, n: int = 3) -> np.ndarray:
    """Gaussian random walk from the origin in (x, y); the angle stays 0."""
    if count < 2:
        raise ValueError("count must be at least 2")
    if step_scale < 0:
        raise ValueError("step_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    steps = step_scale * rng.standard_normal((count - 1, 2))
    wp = np.zeros((count, n))
    wp[1:, :2] = np.cumsum(steps, axis=0)
    return wp


def spline_fit(waypoints, waypoint_spacing: float = 1.0) -> SplineReference:
    waypoints = np.asarray(waypoints, dtype=float)
    times = waypoint_spacing * np.arange(len(waypoints))
    return SplineReference(times, waypoints)


def double_loop(T: float = 10.0, A: float = 1.0, B: float = 1.0) -> DoubleLoop:
    return DoubleLoop(T, A, B)


def random_spline_reference(seed, T: float = 10.0, spacing: float = 1.0,
                            step_scale: float = 0.5) -> SplineReference:
    """Spline through a random walk; waypoints cover at least [0, T]."""
    count = max(2, int(np.ceil(T / spacing - 1e-9)) + 1)
    return spline_fit(random_walk_waypoints(seed, count, step_scale), spacing)


def c2_residual(ref: RefTrajectory, h: float = 1e-4, points: int = 1000) -> tuple[float, float]:
    """Max central-difference mismatch of (q -> qd) and (qd -> qdd) on a grid."""
    t = np.linspace(h, ref.T - h, points)
    q_p, qd_p, _ = ref(t + h)
    q_m, qd_m, _ = ref(t - h)
    _, qd, qdd = ref(t)
    e1 = np.max(np.abs((q_p - q_m) / (2 * h) - qd))
    e2 = np.max(np.abs((qd_p - qd_m) / (2 * h) - qdd))
    return float(e1), float(e2)


def write_reference_csv(path, ref: RefTrajectory, dt: float):
    t = np.arange(int(round(ref.T / dt)) + 1) * dt
    q, qd, qdd = ref(t)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "xr", "yr", "phir", "xdr", "ydr", "phidr", "xddr", "yddr", "phiddr"])
        for k in range(len(t)):
            wr.writerow([f"{v:.17g}" for v in (t[k], *q[k], *qd[k], *qdd[k])])
