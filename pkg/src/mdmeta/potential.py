"""The separable l_p potential psi(a) = sum |a_i|^p + (eps/2)||a||^2 and its Bregman divergence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as ad

P_MARGIN = 0.05
DEFAULT_EPS = 1e-3


class SingularHessianError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class PotentialParams:
    p: float = 2.0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.p >= 1.0 + P_MARGIN:
            raise ValueError(f"p={self.p} violates p >= {1.0 + P_MARGIN}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


def psi(a, pp: PotentialParams) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sum(np.abs(a) ** pp.p) + 0.5 * pp.eps * np.dot(a, a))


def psi_grad(a, pp: PotentialParams) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return pp.p * np.sign(a) * np.abs(a) ** (pp.p - 1.0) + pp.eps * a


def psi_hess_diag(a, pp: PotentialParams) -> np.ndarray:
    """Diagonal of the Hessian of psi; psi is separable so this is all of it."""
    a = np.asarray(a, dtype=float)
    absa = np.abs(a)
    if pp.p < 2.0 and pp.eps == 0.0 and np.any(absa == 0.0):
        raise SingularHessianError(
            f"Hessian of psi is unbounded at a zero coordinate for p={pp.p} < 2 without smoothing")
    with np.errstate(divide="ignore"):
        # 0**0 == 1 covers p == 2 at a zero coordinate
        curv = absa ** (pp.p - 2.0)
    curv = np.where(absa == 0.0, 1.0 if pp.p == 2.0 else (0.0 if pp.p > 2.0 else np.inf), curv)
    return pp.p * (pp.p - 1.0) * curv + pp.eps


def bregman(y, x, pp: PotentialParams) -> float:
    """d_psi(y || x) = psi(y) - psi(x) - <y - x, grad psi(x)>.

    Summed per coordinate (psi is separable); each term is nonnegative, and
    the clip only removes rounding below zero.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != x.shape:
        raise ValueError("bregman arguments must have the same shape")
    p = pp.p
    ax = np.abs(x)
    t = np.abs(y) ** p - ax ** p - (y - x) * p * np.sign(x) * ax ** (p - 1.0)
    dy = y - x
    return float(np.sum(np.maximum(t, 0.0)) + 0.5 * pp.eps * np.dot(dy, dy))


def hess_diag_smooth(a, p, eps, kappa: float = ad.KAPPA):
    """Tape-friendly Hessian diagonal: p(p-1) (a^2 + kappa^2)^((p-2)/2) + eps.

    ``a`` and ``p`` may be ``Var``s. The floor kappa keeps the power finite
    and smooth in p at a = 0 for any p.
    """
    return hess_from_coeffs(a, hess_coeffs(p), eps, kappa)


def hess_coeffs(p):
    """(p(p-1), (p-2)/2): the p-dependent factors, computed once per rollout."""
    return ad.mul(p, ad.sub(p, 1.0)), ad.mul(ad.sub(p, 2.0), 0.5)


def hess_from_coeffs(a, coeffs, eps, kappa: float = ad.KAPPA):
    scale, expo = coeffs
    base = ad.add(ad.mul(a, a), kappa * kappa)
    return ad.add(ad.mul(scale, ad.power(base, expo)), eps)
