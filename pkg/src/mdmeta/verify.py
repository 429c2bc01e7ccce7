"""Numerical checks of the closed-loop stability guarantee on sampled trajectories.

Norms: l2 for vectors, the l2-induced operator norm for matrices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from .controller import Gains
from .potential import PotentialParams, bregman
from .simulate import Trajectory


def lyapunov(s, M, a, ahat, P, pp: PotentialParams) -> float:
    """V = 1/2 s^T M s + d_psi(P a || P ahat), with P given as its diagonal."""
    s = np.asarray(s, dtype=float)
    P = np.asarray(P, dtype=float)
    Pm = np.diag(P) if P.ndim == 1 else P
    return 0.5 * float(s @ np.asarray(M, dtype=float) @ s) + bregman(Pm @ a, Pm @ ahat, pp)


def sliding_series(tr: Trajectory, lam) -> np.ndarray:
    e = tr.q - tr.q_r
    ed = tr.qd - tr.qd_r
    return ed + np.asarray(lam) * e


def lyapunov_series(tr: Trajectory, a, gains: Gains, pp: PotentialParams, mass=None) -> np.ndarray:
    s = sliding_series(tr, gains.lam)
    M = np.eye(s.shape[1]) if mass is None else mass
    return np.array([lyapunov(s[k], M if np.ndim(M) == 2 else M(tr.q[k]), a, tr.ahat[k], gains.P, pp)
                     for k in range(len(tr.t))])


def _as_matrix(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    return np.diag(L) if L.ndim == 1 else L


def gamma(lam) -> float:
    """Integral over [0, inf) of ||exp(-tau Lambda)||_2, by adaptive quadrature.

    The integrand is truncated where it falls below 1e-12.
    """
    L = _as_matrix(lam)
    if not np.allclose(L, L.T):
        raise ValueError("Lambda must be symmetric")
    ev, V = np.linalg.eigh(L)
    if ev.min() <= 0:
        raise ValueError("Lambda must be positive definite")

    def integrand(tau):
        return np.linalg.norm((V * np.exp(-tau * ev)) @ V.T, 2)

    # ||exp(-tau L)|| = exp(-tau lam_min) for symmetric L: find the truncation point
    tau_max = np.log(1e12) / ev.min()
    # split into decades of the decay time so quad resolves the exponential
    knots = np.linspace(0.0, tau_max, 29)
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)
        total += val
    return float(total)


def ultimate_radius(lam, K, delta: float, a_norm: float) -> float:
    Kmin = float(np.min(np.linalg.eigvalsh(_as_matrix(K))))
    return gamma(lam) * delta * a_norm / Kmin


@dataclass
class StabilityReport:
    t: list
    V: list
    Vdot: list
    bound: list
    tolerance: list
    violations: int
    violation_fraction: float
    radius: float
    contained: bool
    entry_time: float
    final_error: float
    delta: float
    a_norm: float

    def to_json(self, path=None, arrays: bool = True) -> str:
        doc = asdict(self)
        if not arrays:
            for key in ("t", "V", "Vdot", "bound", "tolerance"):
                doc.pop(key)
        doc["entry_time"] = None if not np.isfinite(self.entry_time) else self.entry_time
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def vdot_bound_check(tr: Trajectory, a, delta: float, gains: Gains, pp: PotentialParams,
                     rel_tol: float = 1e-4, mass=None):
    """Finite-difference V along the samples and compare with -lmin(K)|s|^2 + |s| delta |a|.

    Returns (V, Vdot, bound, tol, violations).
    """
    a = np.asarray(a, dtype=float)
    V = lyapunov_series(tr, a, gains, pp, mass)
    Vdot = np.gradient(V, tr.t, edge_order=2)
    s = sliding_series(tr, gains.lam)
    sn = np.linalg.norm(s, axis=1)
    Kmin = float(np.min(np.linalg.eigvalsh(_as_matrix(gains.K))))
    bound = -Kmin * sn ** 2 + sn * delta * np.linalg.norm(a)
    tol = rel_tol * np.maximum(1.0, np.abs(V))
    violations = int(np.sum(Vdot > bound + tol))
    return V, Vdot, bound, tol, violations


def ultimate_bound_check(tr: Trajectory, a, delta: float, gains: Gains,
                         dwell_fraction: float = 0.2, zero_tol: float = 1e-3):
    """(radius, contained, entry_time).

    entry_time is the earliest sample time after which ||q - q_r|| stays within
    the radius for the rest of the record (inf if the final sample is outside).
    Containment requires that stay to cover at least ``dwell_fraction`` of
    the horizon. With delta = 0 the radius is 0 and the final error must be
    below ``zero_tol``.
    """
    a = np.asarray(a, dtype=float)
    radius = ultimate_radius(gains.lam, gains.K, delta, float(np.linalg.norm(a)))
    err = np.linalg.norm(tr.q - tr.q_r, axis=1)
    limit = radius if radius > 0 else zero_tol
    outside = np.nonzero(err > limit)[0]
    if len(outside) == 0:
        k = 0
    elif outside[-1] == len(err) - 1:
        return radius, False, float("inf")
    else:
        k = int(outside[-1]) + 1
    entry = float(tr.t[k])
    contained = (tr.t[-1] - entry) >= dwell_fraction * (tr.t[-1] - tr.t[0])
    return radius, bool(contained), entry


def stability_report(tr: Trajectory, a, delta: float, gains: Gains, pp: PotentialParams,
                     rel_tol: float = 1e-4, mass=None) -> StabilityReport:
    V, Vdot, bound, tol, violations = vdot_bound_check(tr, a, delta, gains, pp, rel_tol, mass)
    radius, contained, entry = ultimate_bound_check(tr, a, delta, gains)
    return StabilityReport(
        t=tr.t.tolist(), V=V.tolist(), Vdot=Vdot.tolist(), bound=bound.tolist(), tolerance=tol.tolist(),
        violations=violations, violation_fraction=violations / len(V), radius=radius,
        contained=contained, entry_time=entry,
        final_error=float(np.linalg.norm(tr.q[-1] - tr.q_r[-1])), delta=float(delta),
        a_norm=float(np.linalg.norm(a)))


@dataclass
class PerturbedFeatures:
    """Oracle features plus a known error: Y(q, qd) + delta sin(<w, z> + b) E.

    E is a fixed (n, d) matrix scaled to unit operator norm, so
    sup ||Y_hat - Y||_2 = delta exactly (attained where |sin| = 1).
    """

    oracle: object
    delta: float
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        rng = np.random.default_rng(self.seed)
        n, d = self.oracle.n, self.oracle.d
        E = rng.standard_normal((n, d))
        self.E = E / np.linalg.norm(E, 2)
        self.w = rng.standard_normal(2 * n)
        self.b = rng.uniform(0.0, 2 * np.pi)

    def __call__(self, q, qd):
        Y = self.oracle.features(q, qd)
        if self.delta == 0:
            return Y
        z = np.concatenate([np.asarray(q, dtype=float), np.asarray(qd, dtype=float)], axis=-1)
        scale = self.delta * np.sin(z @ self.w + self.b)
        return Y + scale[..., None, None] * self.E
