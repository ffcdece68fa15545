"""Instruments, weights and targeted incentive policies over discrete cells.

A policy draws a cell w from a targeting distribution p and offers the
incentive to a unit of that cell. P_C is the chance the incentive reaches a
complier, APE the expected effect per incentive and LAPE = APE / P_C the
effect per complier reached.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cwlate.errors import DegenerateDenominator, InvalidEstimand, NegativeCompliance, SignViolation
from cwlate.estimators import EstimandKind

logger = logging.getLogger(__name__)

PROBABILITY_TOL = 1e-10


def _vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite one-dimensional vector")
    return arr


@dataclass(frozen=True, eq=False)
class PolicySpec:
    p: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        p = _vector(self.p, "p")
        f = _vector(self.f, "f")
        if p.shape != f.shape:
            raise ValueError(f"p has {p.size} cells but f has {f.size}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROBABILITY_TOL * max(1, p.size):
            raise ValueError("Targeting distribution p must be nonnegative and sum to 1")
        if np.any(f <= 0) or abs(f.sum() - 1.0) > PROBABILITY_TOL * max(1, f.size):
            raise ValueError("Cell probabilities f must be positive and sum to 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "f", f)


@dataclass(frozen=True)
class PolicyEffects:
    p_c: float
    ape: float
    lape: Optional[float]

    def to_dict(self) -> dict:
        return {"p_c": self.p_c, "ape": self.ape, "lape": self.lape}


def weights_from_instrument(b, delta_x, pi) -> np.ndarray:
    """omega_j = b_j delta_X_j / sum_k pi_k b_k delta_X_k, so that sum pi omega = 1."""
    b = _vector(b, "b")
    delta_x = _vector(delta_x, "delta_x")
    pi = _vector(pi, "pi")
    for j in np.flatnonzero(b * delta_x < 0):
        raise SignViolation(int(j))
    denominator = float(np.sum(pi * b * delta_x))
    if not denominator > 0:
        raise DegenerateDenominator(denominator)
    return b * delta_x / denominator


def policy_from_instrument(b, f) -> PolicySpec:
    """Targeting distribution p_j = b_j f_j / sum_k f_k b_k."""
    b = _vector(b, "b")
    f = _vector(f, "f")
    for j in np.flatnonzero((f > 0) & (b < 0)):
        raise SignViolation(int(j))
    denominator = float(f @ b)
    if not denominator > 0:
        raise DegenerateDenominator(denominator)
    return PolicySpec(p=b * f / denominator, f=f)


def instrument_from_policy(spec: PolicySpec) -> np.ndarray:
    """Instrument implied by a policy, b_j = p_j / f_j, up to positive scale."""
    return spec.p / spec.f


def policy_tilt(p, f) -> np.ndarray:
    """p_j / f_j, zero where f_j is zero."""
    p = _vector(p, "p")
    f = _vector(f, "f")
    tilt = np.zeros_like(p)
    positive = f > 0
    tilt[positive] = p[positive] / f[positive]
    return tilt


def policy_effects(spec: PolicySpec, beta, delta_x) -> PolicyEffects:
    beta = _vector(beta, "beta")
    delta_x = _vector(delta_x, "delta_x")
    if beta.shape != spec.p.shape or delta_x.shape != spec.p.shape:
        raise ValueError("beta and delta_x must have one entry per cell")
    for j in np.flatnonzero(delta_x < 0):
        raise NegativeCompliance(int(j), float(delta_x[j]))
    if np.any(delta_x > 1):
        raise ValueError("First-stage discontinuities must lie in [-1, 1]")
    p_c = float(spec.p @ delta_x)
    ape = float(np.sum(beta * delta_x * spec.p))
    lape = ape / p_c if p_c > 0 else None
    return PolicyEffects(p_c=p_c, ape=ape, lape=lape)


def policy_for_estimand(
    kind: EstimandKind,
    delta_x,
    f,
    delta_y=None,
    f_star=None,
) -> PolicySpec:
    """Targeting distribution whose LAPE equals the given weighted LATE."""
    delta_x = _vector(delta_x, "delta_x")
    f = _vector(f, "f")
    kind = EstimandKind(kind)
    if kind is EstimandKind.CWLATE:
        b = delta_x
    elif kind is EstimandKind.UNCONDITIONAL_WALD:
        b = np.ones_like(f)
    elif kind is EstimandKind.AVERAGE:
        b = 1.0 / delta_x
    elif kind is EstimandKind.COUNTERFACTUAL:
        if f_star is None:
            raise InvalidEstimand("Counterfactual policy requires f_star")
        b = _vector(f_star, "f_star") / f / delta_x
    elif kind is EstimandKind.WELFARE:
        if delta_y is None:
            raise InvalidEstimand("Welfare policy requires delta_y")
        b = np.where(_vector(delta_y, "delta_y") >= 0, 1.0 / delta_x, 0.0)
    else:
        raise InvalidEstimand("Custom instruments map to policies through policy_from_instrument")
    return policy_from_instrument(b, f)
