"""Weighted local average treatment effects built from cell discontinuities.

Every estimand is a Wald ratio sum(pi b delta_Y) / sum(pi b delta_X) for an
instrument b over cells. The built-in kinds differ only in how b is formed
from the estimated first stage.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from cwlate.core import DEFAULT_MIN_SIDE_COUNT, KernelSpec, RddDataset, build_partition
from cwlate.errors import (
    DegenerateDenominator,
    InvalidEstimand,
    SignViolation,
    WeakCell,
    ZeroFirstStage,
)
from cwlate.localpoly import CellDiscontinuities, cell_discontinuities

logger = logging.getLogger(__name__)

DEFAULT_ZERO_TOL = 1e-8


class EstimandKind(str, Enum):
    CWLATE = "cwlate"
    AVERAGE = "average"
    COUNTERFACTUAL = "counterfactual"
    WELFARE = "welfare"
    CUSTOM = "custom"
    UNCONDITIONAL_WALD = "unconditional_wald"

    @classmethod
    def values(cls) -> list[str]:
        return [kind.value for kind in cls]


_ALIASES = {
    "custom_instrument": EstimandKind.CUSTOM,
    "cw": EstimandKind.CWLATE,
    "unconditional": EstimandKind.UNCONDITIONAL_WALD,
}


def _parse_vector(text: str, name: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InvalidEstimand(f"Could not parse {name} values from '{text}'") from None
    if not values:
        raise InvalidEstimand(f"Estimand {name} needs at least one value")
    return values


@dataclass(frozen=True)
class EstimandSpec:
    """Which weighted LATE to target.

    ``f_star`` is the counterfactual cell distribution for the counterfactual
    kind and ``b`` the instrument for the custom kind, both ordered like the
    retained cells of the partition.
    """

    kind: EstimandKind = EstimandKind.CWLATE
    f_star: Optional[tuple[float, ...]] = None
    b: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", EstimandKind(self.kind))
        except ValueError:
            valid = ", ".join(EstimandKind.values())
            message = f"Unknown estimand '{self.kind}'. Valid options: {valid}"
            raise InvalidEstimand(message) from None
        if self.kind is EstimandKind.COUNTERFACTUAL:
            if self.f_star is None:
                raise InvalidEstimand("Counterfactual estimand requires f_star")
            f_star = np.asarray(self.f_star, dtype=float)
            if np.any(f_star < 0) or not np.all(np.isfinite(f_star)):
                raise InvalidEstimand("Counterfactual weights must be finite and nonnegative")
            if abs(f_star.sum() - 1.0) > 1e-8:
                raise InvalidEstimand(f"Counterfactual weights sum to {f_star.sum():.10g}, not 1")
            object.__setattr__(self, "f_star", tuple(float(v) for v in f_star))
        if self.kind is EstimandKind.CUSTOM:
            if self.b is None:
                raise InvalidEstimand("Custom estimand requires an instrument vector b")
            b = np.asarray(self.b, dtype=float)
            if not np.all(np.isfinite(b)):
                raise InvalidEstimand("Custom instrument must be finite")
            object.__setattr__(self, "b", tuple(float(v) for v in b))

    @classmethod
    def parse(cls, text: str) -> "EstimandSpec":
        """Parse ``cwlate``, ``average``, ``welfare``, ``unconditional_wald``,
        ``counterfactual:<f1,f2,...>`` or ``custom:<b1,b2,...>``."""
        name, _, params = text.strip().partition(":")
        name = name.strip().lower()
        kind = _ALIASES.get(name)
        if kind is None:
            try:
                kind = EstimandKind(name)
            except ValueError:
                valid = ", ".join(EstimandKind.values())
                message = f"Unknown estimand '{name}'. Valid options: {valid}"
                raise InvalidEstimand(message) from None
        if kind is EstimandKind.COUNTERFACTUAL:
            return cls(kind, f_star=_parse_vector(params, "counterfactual"))
        if kind is EstimandKind.CUSTOM:
            return cls(kind, b=_parse_vector(params, "custom"))
        if params:
            raise InvalidEstimand(f"Estimand '{name}' takes no parameters")
        return cls(kind)

    @property
    def label(self) -> str:
        if self.kind is EstimandKind.COUNTERFACTUAL:
            return f"counterfactual:{','.join(repr(v) for v in self.f_star)}"
        if self.kind is EstimandKind.CUSTOM:
            return f"custom:{','.join(repr(v) for v in self.b)}"
        return self.kind.value


@dataclass(frozen=True, eq=False)
class WlateResult:
    beta_hat: float
    tau_y: float
    tau_x: float
    weights: np.ndarray
    conditional_lates: np.ndarray
    defined: np.ndarray
    instrument: np.ndarray
    kind: EstimandKind = EstimandKind.CWLATE
    dropped: tuple = ()
    flagged: tuple = ()


class GainsSign(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    ZERO = "zero"


def conditional_lates(
    d: CellDiscontinuities, zero_tol: float = DEFAULT_ZERO_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell delta_Y/delta_X with a mask of the cells where it is defined."""
    return _conditional_lates(d.delta_y, d.delta_x, zero_tol)


def _conditional_lates(
    delta_y: np.ndarray, delta_x: np.ndarray, zero_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    defined = np.abs(delta_x) > zero_tol
    values = np.full(len(delta_x), np.nan)
    values[defined] = delta_y[defined] / delta_x[defined]
    return values, defined


def _check_length(values: Sequence[float], m: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (m,):
        raise InvalidEstimand(f"{name} has {arr.size} entries but there are {m} retained cells")
    return arr


def _require_strong(delta_x: np.ndarray, cells: np.ndarray, zero_tol: float) -> None:
    for j in np.flatnonzero(cells):
        if abs(delta_x[j]) <= zero_tol:
            raise WeakCell(int(j), float(delta_x[j]), zero_tol)


def instrument_for(
    spec: EstimandSpec,
    delta_y: np.ndarray,
    delta_x: np.ndarray,
    pi: np.ndarray,
    zero_tol: float = DEFAULT_ZERO_TOL,
) -> np.ndarray:
    """The instrument b over cells that the estimand uses."""
    m = len(delta_x)
    kind = spec.kind
    if kind is EstimandKind.CWLATE:
        return np.array(delta_x, dtype=float)
    if kind is EstimandKind.AVERAGE:
        _require_strong(delta_x, np.ones(m, dtype=bool), zero_tol)
        return 1.0 / delta_x
    if kind is EstimandKind.COUNTERFACTUAL:
        f_star = _check_length(spec.f_star, m, "Counterfactual distribution")
        support = f_star > 0
        _require_strong(delta_x, support, zero_tol)
        b = np.zeros(m)
        b[support] = f_star[support] / pi[support] / delta_x[support]
        return b
    if kind is EstimandKind.WELFARE:
        kept = delta_y >= 0
        _require_strong(delta_x, kept, zero_tol)
        b = np.zeros(m)
        b[kept] = 1.0 / delta_x[kept]
        return b
    if kind is EstimandKind.CUSTOM:
        b = _check_length(spec.b, m, "Custom instrument")
        for j in np.flatnonzero(b * delta_x < 0):
            raise SignViolation(int(j))
        return b
    if m == 1:
        return np.ones(1)
    raise InvalidEstimand("The unconditional Wald estimand is computed on pooled data")


def wald_aggregate(
    delta_y: np.ndarray, delta_x: np.ndarray, pi: np.ndarray, b: np.ndarray
) -> tuple[float, float, float, np.ndarray]:
    """Return (beta, tau_Y, tau_X, weights) for instrument b."""
    c = pi * b
    tau_x = float(c @ delta_x)
    if not tau_x > 0:
        raise DegenerateDenominator(tau_x)
    tau_y = float(c @ delta_y)
    return tau_y / tau_x, tau_y, tau_x, c * delta_x / tau_x


def wlate_from_vectors(
    delta_y: np.ndarray,
    delta_x: np.ndarray,
    pi: np.ndarray,
    spec: EstimandSpec,
    zero_tol: float = DEFAULT_ZERO_TOL,
) -> WlateResult:
    delta_y = np.asarray(delta_y, dtype=float)
    delta_x = np.asarray(delta_x, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if spec.kind in (EstimandKind.CWLATE, EstimandKind.UNCONDITIONAL_WALD) and not np.any(delta_x):
        raise ZeroFirstStage()
    b = instrument_for(spec, delta_y, delta_x, pi, zero_tol)
    if spec.kind is EstimandKind.UNCONDITIONAL_WALD:
        beta = float(delta_y[0] / delta_x[0])
        tau_y, tau_x, weights = float(delta_y[0]), float(delta_x[0]), np.ones(1)
    else:
        beta, tau_y, tau_x, weights = wald_aggregate(delta_y, delta_x, pi, b)
    lates, defined = _conditional_lates(delta_y, delta_x, zero_tol)
    return WlateResult(
        beta_hat=beta,
        tau_y=tau_y,
        tau_x=tau_x,
        weights=weights,
        conditional_lates=lates,
        defined=defined,
        instrument=b,
        kind=spec.kind,
    )


def _finish(result: WlateResult, d: CellDiscontinuities) -> WlateResult:
    flagged: tuple = ()
    if result.kind is EstimandKind.WELFARE and d.se_delta_y is not None:
        near = np.abs(d.delta_y) <= d.se_delta_y
        flagged = tuple(int(j) for j in np.flatnonzero(near))
        if flagged:
            logger.warning(
                "Welfare indicator is within one standard error of zero in cells %s",
                ", ".join(str(d.partition.labels[j]) for j in flagged),
            )
    return WlateResult(
        beta_hat=result.beta_hat,
        tau_y=result.tau_y,
        tau_x=result.tau_x,
        weights=result.weights,
        conditional_lates=result.conditional_lates,
        defined=result.defined,
        instrument=result.instrument,
        kind=result.kind,
        dropped=d.partition.dropped,
        flagged=flagged,
    )


def cwlate(d: CellDiscontinuities) -> WlateResult:
    """Compliance-weighted LATE: cells weighted by pi delta_X^2."""
    return _finish(wlate_from_vectors(d.delta_y, d.delta_x, d.pi_hat, EstimandSpec()), d)


def wlate(
    d: CellDiscontinuities, spec: EstimandSpec, zero_tol: float = DEFAULT_ZERO_TOL
) -> WlateResult:
    if spec.kind is EstimandKind.CWLATE:
        return cwlate(d)
    return _finish(wlate_from_vectors(d.delta_y, d.delta_x, d.pi_hat, spec, zero_tol), d)


def unconditional_wald(
    data: RddDataset,
    p: int,
    h: float,
    kernel: KernelSpec,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
) -> WlateResult:
    """Standard fuzzy RDD Wald ratio, ignoring the cells."""
    pooled = data.pooled()
    d = cell_discontinuities(pooled, build_partition(pooled, min_side_count), p, h, kernel)
    return _finish(
        wlate_from_vectors(d.delta_y, d.delta_x, d.pi_hat, EstimandSpec("unconditional_wald")), d
    )


def selection_on_gains_sign(beta_cw: float, beta_u: float, tol: float = 0.0) -> GainsSign:
    diff = beta_cw - beta_u
    if abs(diff) <= tol:
        return GainsSign.ZERO
    return GainsSign.POSITIVE if diff > 0 else GainsSign.NEGATIVE


def instrument_strength(b: np.ndarray, delta_x: np.ndarray, pi: np.ndarray) -> float:
    """Absolute pi-weighted correlation between an instrument and the first stage.

    Equals one for the compliance-weighted instrument whenever the first stage
    varies across cells.
    """
    b = np.asarray(b, dtype=float)
    delta_x = np.asarray(delta_x, dtype=float)
    pi = np.asarray(pi, dtype=float)
    b_c = b - pi @ b
    d_c = delta_x - pi @ delta_x
    var_b = pi @ b_c**2
    var_d = pi @ d_c**2
    if var_b <= 0 or var_d <= 0:
        return float("nan")
    return float(abs(pi @ (b_c * d_c)) / np.sqrt(var_b * var_d))
