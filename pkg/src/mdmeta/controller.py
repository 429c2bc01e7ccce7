"""Mirror-descent adaptive controller, its adaptation law and a PID baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as ad
from .dynamics import ManipulatorModel, PlanarQuadrotor
from .potential import (PotentialParams, SingularHessianError, hess_coeffs, hess_from_coeffs,
                        psi_hess_diag)


@dataclass
class Gains:
    """Diagonal positive-definite Lambda, K (n,) and P (d,), stored as diagonals."""

    lam: np.ndarray
    K: np.ndarray
    P: np.ndarray
    _raw: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        for name in ("lam", "K", "P"):
            v = getattr(self, name)
            if v.ndim != 1 or np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"gain {name} must be a positive finite diagonal")

    @classmethod
    def from_raw(cls, raw_lam, raw_K, raw_P) -> "Gains":
        raw = tuple(np.array(r, dtype=float) for r in (raw_lam, raw_K, raw_P))
        return cls(np.exp(raw[0]), np.exp(raw[1]), np.exp(raw[2]), raw)

    def raw(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Log-parameterization; exact when the gains were built by ``from_raw``."""
        if self._raw is not None:
            return tuple(r.copy() for r in self._raw)
        return np.log(self.lam), np.log(self.K), np.log(self.P)

    def matrices(self):
        return np.diag(self.lam), np.diag(self.K), np.diag(self.P)

    def scaled(self, lam=1.0, K=1.0, P=1.0) -> "Gains":
        return Gains(self.lam * lam, self.K * K, self.P * P)


def sliding(q, qd, q_r, qd_r, qdd_r, lam):
    """Return (s, qd_v, qdd_v) for s = e_dot + Lambda e, e = q - q_r."""
    e = q - q_r
    ed = qd - qd_r
    s = ed + lam * e
    return s, qd_r - lam * e, qdd_r - lam * ed


def _adapt_direction(Y, s):
    return ad.bmtv(Y, s)


def adaptation_rhs(ahat, s, Y, P, pp: PotentialParams):
    """d(ahat)/dt = P^-1 (hess psi(P ahat))^-1 P^-1 Y^T s, exact Hessian.

    With psi = ||.||^2 this is (2 P^T P)^-1 Y^T s, the gradient law.
    """
    ahat = np.asarray(ahat, dtype=float)
    P = np.asarray(P, dtype=float)
    H = psi_hess_diag(P * ahat, pp)
    if np.any(~np.isfinite(H)) or np.any(H <= 0):
        raise SingularHessianError("Hessian of psi is not invertible at P*ahat")
    return np.asarray(_adapt_direction(np.asarray(Y, dtype=float), np.asarray(s, dtype=float))) / (P * H * P)


def adaptation_rhs_smooth(ahat, s, Y, P, p, eps, coeffs=None):
    """Tape-friendly version of ``adaptation_rhs`` with a kappa-floored Hessian.

    ``coeffs`` may carry precomputed ``hess_coeffs(p)``.
    """
    H = hess_from_coeffs(ad.mul(P, ahat), coeffs if coeffs is not None else hess_coeffs(p), eps)
    return ad.div(_adapt_direction(Y, s), ad.mul(ad.mul(P, H), P))


def md_control(model: ManipulatorModel, q, qd, ref_t, ahat, lam, K, Y):
    """u = tau^-1(M qdd_v + C qd_v + g - K s - Y ahat); returns (u, s)."""
    q_r, qd_r, qdd_r = ref_t
    s, qd_v, qdd_v = sliding(q, qd, q_r, qd_r, qdd_r, lam)
    tau_bar = model.nominal_force(q, qd, qd_v, qdd_v) - K * s
    return model.tau_inverse(q, qd, tau_bar - ad.bmv(Y, ahat)), s


@dataclass(frozen=True)
class PidGains:
    kp: float = 10.0
    kd: float = 5.0
    ki: float = 1.0


def pid_force(q, qd, ref_t, gains: PidGains, integral, model: PlanarQuadrotor):
    q_r, qd_r, qdd_r = ref_t
    e = q - q_r
    ed = qd - qd_r
    f = model.g_vec + qdd_r - gains.kp * e - gains.kd * ed - gains.ki * integral
    return model.tau_inverse(q, qd, f)


def pid_control(q, qd, ref_t, gains: PidGains, integral, dt: float,
                model: PlanarQuadrotor | None = None):
    """One discrete PID evaluation; returns (u, integral + e dt)."""
    model = model or PlanarQuadrotor()
    q = np.asarray(q, dtype=float)
    u = pid_force(q, qd, ref_t, gains, integral, model)
    return u, integral + (q - ref_t[0]) * dt
