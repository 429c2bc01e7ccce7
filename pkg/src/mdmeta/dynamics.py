"""Manipulator-form dynamics M(q) qdd + C(q, qd) qd + g(q) = tau(u) + f_ext.

All state arguments carry a leading batch axis optionally: ``q`` is either
shape (n,) or (B, n). The quadrotor methods are written with ``diffengine``
ops so they can be recorded on a tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad

GRAVITY = -9.81


class ManipulatorModel:
    """Generic fully actuated manipulator; subclasses supply M, C, g and tau."""

    n: int
    m: int

    def mass(self, q) -> np.ndarray:
        raise NotImplementedError

    def coriolis(self, q, qd) -> np.ndarray:
        raise NotImplementedError

    def gravity(self, q) -> np.ndarray:
        raise NotImplementedError

    def tau(self, q, qd, u) -> np.ndarray:
        raise NotImplementedError

    def tau_inverse(self, q, qd, f) -> np.ndarray:
        raise NotImplementedError

    def accel(self, q, qd, u, f_ext):
        """Solve M qdd = tau(u) + f_ext - C qd - g for a single state."""
        M = self.mass(q)
        if np.linalg.cond(M) > 1e12:
            raise np.linalg.LinAlgError("mass matrix is singular")
        rhs = self.tau(q, qd, u) + f_ext - self.coriolis(q, qd) @ qd - self.gravity(q)
        return np.linalg.solve(M, rhs)

    def nominal_force(self, q, qd, qd_v, qdd_v):
        """M qdd_v + C qd_v + g, the certainty-equivalence feedforward."""
        return self.mass(q) @ qdd_v + self.coriolis(q, qd) @ qd_v + self.gravity(q)


def rotate(phi, v):
    """R(phi) v with R the planar rotation acting on the first two entries."""
    return ad.rotate(phi, v)


def rotate_T(phi, v):
    return ad.rotate(phi, v, transpose=True)


def rotation_matrix(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class PlanarQuadrotor(ManipulatorModel):
    """Fully actuated planar quadrotor: M = I, C = 0, g(q) = [0, -g, 0]."""

    n = 3
    m = 3

    def __init__(self, g_const: float = GRAVITY):
        self.g_const = g_const
        self.g_vec = np.array([0.0, -g_const, 0.0])

    def mass(self, q):
        return np.eye(3)

    def coriolis(self, q, qd):
        return np.zeros((3, 3))

    def gravity(self, q):
        return self.g_vec

    def tau(self, q, qd, u):
        return rotate(ad.take(q, (..., 2)), u)

    def tau_inverse(self, q, qd, f):
        return rotate_T(ad.take(q, (..., 2)), f)

    def accel(self, q, qd, u, f_ext):
        return self.tau(q, qd, u) + f_ext - self.g_vec

    def nominal_force(self, q, qd, qd_v, qdd_v):
        return qdd_v + self.g_vec


@dataclass(frozen=True)
class WindDrag:
    w: float = 0.0
    beta1: float = 0.1
    beta2: float = 1.0

    def __post_init__(self):
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("drag coefficients must be positive")

    def __call__(self, q, qd):
        return wind_drag(q, qd, self)


def wind_drag(q, qd, wd: WindDrag):
    """Quadratic drag from a wind of speed w along inertial x (N/kg).

    Accepts arrays or tape Vars with an optional leading batch axis.
    """
    phi = ad.take(q, (..., 2))
    c, s = ad.cos(phi), ad.sin(phi)
    rx = ad.take(qd, (..., 0)) - wd.w
    vy = ad.take(qd, (..., 1))
    v1 = rx * c + vy * s
    v2 = -rx * s + vy * c
    d1 = wd.beta1 * v1 * ad.abs_(v1)
    d2 = wd.beta2 * v2 * ad.abs_(v2)
    zero = 0.0 * d1
    return -ad.stack([c * d1 - s * d2, s * d1 + c * d2, zero], axis=-1)


@dataclass
class OracleDisturbance:
    """Known linearly parameterized disturbance f(q, qd) = Y(q, qd) a.

    Y holds random Fourier features of z = (q, qd): column k of row i is
    sin or cos of <omega_ik, z> + b_ik, so every entry lies in [-1, 1].
    """

    a: np.ndarray
    seed: int = 0
    n: int = 3
    omega: np.ndarray = field(init=False, repr=False)
    phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        d = self.a.size
        rng = np.random.default_rng(self.seed)
        self.omega = rng.standard_normal((self.n, d, 2 * self.n))
        self.phase = rng.uniform(0.0, 2 * np.pi, (self.n, d))

    @property
    def d(self) -> int:
        return self.a.size

    def features(self, q, qd) -> np.ndarray:
        return oracle_features(q, qd, self.omega, self.phase)

    def __call__(self, q, qd):
        return self.features(q, qd) @ self.a


def oracle_features(q, qd, omega, phase) -> np.ndarray:
    z = np.concatenate([np.asarray(q, dtype=float), np.asarray(qd, dtype=float)], axis=-1)
    arg = np.einsum("ikj,...j->...ik", omega, z) + phase
    d = phase.shape[1]
    cols = np.arange(d)
    return np.where(cols % 2 == 0, np.sin(arg), np.cos(arg))


def skew_residual(model: ManipulatorModel, q, qd, h: float = 1e-6) -> float:
    """||S + S^T|| with S = Mdot - 2C, Mdot by central differences along qd."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    Mdot = (model.mass(q + h * qd) - model.mass(q - h * qd)) / (2 * h)
    S = Mdot - 2 * model.coriolis(q, qd)
    return float(np.linalg.norm(S + S.T))
