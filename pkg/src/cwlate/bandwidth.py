"""MSE-optimal bandwidth selection in three stages.

1. A rule-of-thumb pilot c_n.
2. Derivative bandwidths d_n (one per variable and side) for the third
   derivatives, then the bias bandwidth b_n.
3. The main bandwidth h_n.

Every stage balances a squared leading bias w^(2a) B^2 against a variance
V/(n w^k), which is minimized at w = (k V / (2a B^2 n))^(1/(2a+k)).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy import stats

from cwlate.core import (
    DEFAULT_MIN_SIDE_COUNT,
    CellPartition,
    KernelKind,
    KernelSpec,
    RddDataset,
    build_partition,
)
from cwlate.errors import DegenerateSample, InsufficientSupport
from cwlate.estimators import DEFAULT_ZERO_TOL, EstimandKind, EstimandSpec, wlate
from cwlate.inference import (
    BIAS_ORDER,
    LinearizationCoeffs,
    SideCovariance,
    bias_estimate,
    linearization_coeffs,
    main_fits,
)
from cwlate.localpoly import (
    Residuals,
    Side,
    Variable,
    bias_constants,
    cell_discontinuities,
    fit_side,
    moment_matrices,
)

logger = logging.getLogger(__name__)

PILOT_CONSTANTS = {KernelKind.TRIANGULAR: 2.576, KernelKind.UNIFORM: 1.843}
IQR_TO_SD = 1.349

# Polynomial orders fitted at each stage.
MAIN_ORDER = 1
DERIVATIVE_ORDER = BIAS_ORDER + 1
CURVATURE_ORDER = BIAS_ORDER + 2


@dataclass(eq=False)
class BandwidthReport:
    c_n: float
    d_n: dict[str, float]
    b_n: float
    h_n: float
    constants: dict[str, float] = field(default_factory=dict)
    zero_bias: list[str] = field(default_factory=list)
    clamped: list[str] = field(default_factory=list)
    estimand: str = EstimandKind.CWLATE.value

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def pilot_constant(kernel: KernelSpec) -> float:
    return PILOT_CONSTANTS[kernel.kind]


def pilot_bandwidth(z: np.ndarray, kernel: KernelSpec) -> float:
    """c_n = C_K min(s, IQR/1.349) n^(-1/5)."""
    z = np.asarray(z, dtype=float)
    n = len(z)
    if n < 2:
        raise DegenerateSample(f"Need at least two observations for a pilot bandwidth, got {n}")
    s = float(np.std(z, ddof=1))
    if not s > 0:
        raise DegenerateSample()
    spread = float(stats.iqr(z)) / IQR_TO_SD
    if spread > 0:
        spread = min(s, spread)
    else:
        spread = s
    return pilot_constant(kernel) * spread * n ** (-1.0 / 5.0)


def mse_optimal_bandwidth(
    variance: float, bias: float, n: int, bias_rate: int, variance_rate: int
) -> float:
    """Minimizer of w^(2 bias_rate) bias^2 + variance / (n w^variance_rate).

    Returns ``inf`` when the bias vanishes and 0 when the variance does.
    """
    if bias == 0 or not np.isfinite(bias):
        return math.inf
    if not variance > 0:
        return 0.0
    power = 2 * bias_rate + variance_rate
    return (variance_rate * variance / (2 * bias_rate * bias**2 * n)) ** (1.0 / power)


def bandwidth_limits(
    data: RddDataset,
    partition: CellPartition,
    order: int,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
) -> tuple[float, float]:
    """Smallest bandwidth leaving enough interior points per cell and side, and the range of z."""
    needed = max(min_side_count, order + 2)
    z = data.running
    lower = 0.0
    for side in Side:
        on_side = z >= 0.0 if side is Side.PLUS else z < 0.0
        for j in range(partition.m):
            distances = np.sort(np.abs(z[on_side & partition.members(j)]))
            if len(distances) < needed:
                raise InsufficientSupport(partition.labels[j], side.value, needed, len(distances))
            lower = max(lower, float(distances[needed - 1]))
    retained = z[partition.codes >= 0]
    upper = float(np.ptp(retained))
    lower = float(np.nextafter(lower, math.inf))
    if lower > upper:
        raise InsufficientSupport("all", "both", needed, 0)
    return lower, upper


def _clamp(
    value: float,
    limits: tuple[float, float],
    name: str,
    zero_bias: list[str],
    clamped: list[str],
) -> float:
    lower, upper = limits
    if math.isinf(value):
        logger.warning("Estimated bias for %s is zero; using the upper limit %.6g", name, upper)
        zero_bias.append(name)
        return upper
    if value < lower or value > upper:
        clamped.append(name)
        return min(max(value, lower), upper)
    return value


def _weights_or_shares(weights: np.ndarray, partition: CellPartition) -> np.ndarray:
    # A variable that does not enter the linearization still needs a derivative bandwidth.
    if not np.any(np.abs(weights) > 0):
        return partition.pi_hat
    return weights


def bias_bandwidth(
    data: RddDataset,
    partition: CellPartition,
    coeffs: LinearizationCoeffs,
    c_n: float,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
    details: Optional[dict] = None,
) -> tuple[float, dict[str, float]]:
    """Bias bandwidth b_n and the four derivative bandwidths d_n."""
    details = {} if details is None else details
    zero_bias = details.setdefault("zero_bias", [])
    clamped = details.setdefault("clamped", [])
    n = partition.n_total
    fits = main_fits(data, partition, c_n, kernel)
    b_12 = bias_constants(moment_matrices(data, partition, 1, 2, c_n, c_n, kernel), 1, 2)
    b_223 = bias_constants(moment_matrices(data, partition, 2, 3, c_n, c_n, kernel), 2, 3, s=2)
    b_334 = bias_constants(moment_matrices(data, partition, 3, 4, c_n, c_n, kernel), 3, 4, s=3)
    d_limits = bandwidth_limits(data, partition, DERIVATIVE_ORDER, min_side_count)
    b_limits = bandwidth_limits(data, partition, BIAS_ORDER, min_side_count)
    third = (DERIVATIVE_ORDER, 3, c_n)
    second = (BIAS_ORDER, 2, c_n)
    weights = {Variable.Y: coeffs.c1, Variable.X: coeffs.c2}

    d_n: dict[str, float] = {}
    variance_bc = 0.0
    bias_bc = 0.0
    for side in Side:
        cov = SideCovariance(data, partition, side, fits, kernel, residuals)
        bias_weights = {}
        for variable in Variable:
            key = f"{variable.value}{'+' if side is Side.PLUS else '-'}"
            w = _weights_or_shares(weights[variable], partition)
            variance = n * c_n**7 * float(np.sum(w**2 * cov.cov(variable, variable, third, third)))
            curvature = fit_side(data, partition, variable, side, CURVATURE_ORDER, c_n, kernel)
            bias = float(np.sum(w * curvature.derivative(4) / 24.0 * b_334.side(side)))
            raw = mse_optimal_bandwidth(variance, bias, n, bias_rate=1, variance_rate=7)
            d_n[key] = _clamp(raw, d_limits, f"d_{key}", zero_bias, clamped)
            details[f"V_d_{key}"] = variance
            details[f"B_d_{key}"] = bias

            third_derivative = fit_side(
                data, partition, variable, side, DERIVATIVE_ORDER, d_n[key], kernel
            ).derivative(3)
            g = weights[variable] * b_12.side(side)
            bias_weights[variable] = g
            bias_bc += side.sign * float(
                np.sum(g * third_derivative / 6.0 * b_223.side(side) / 2.0)
            )
        spread = cov.linear_variance(
            bias_weights[Variable.Y], bias_weights[Variable.X], second, second
        )
        variance_bc += n * c_n**5 * spread / 4.0

    raw_b = mse_optimal_bandwidth(variance_bc, bias_bc, n, bias_rate=1, variance_rate=5)
    b_n = _clamp(raw_b, b_limits, "b_n", zero_bias, clamped)
    details["V_b"] = variance_bc
    details["B_b"] = bias_bc
    logger.info("Bias bandwidth b_n=%.6g (pilot c_n=%.6g)", b_n, c_n)
    return b_n, d_n


def main_bandwidth(
    data: RddDataset,
    partition: CellPartition,
    coeffs: LinearizationCoeffs,
    c_n: float,
    b_n: float,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
    details: Optional[dict] = None,
) -> float:
    details = {} if details is None else details
    zero_bias = details.setdefault("zero_bias", [])
    clamped = details.setdefault("clamped", [])
    n = partition.n_total
    fits = main_fits(data, partition, c_n, kernel)
    point = (MAIN_ORDER, 0, c_n)
    variance = 0.0
    for side in Side:
        cov = SideCovariance(data, partition, side, fits, kernel, residuals)
        variance += cov.linear_variance(coeffs.c1, coeffs.c2, point, point)
    variance *= n * c_n
    bias = bias_estimate(data, partition, coeffs, c_n, b_n, kernel)
    raw = mse_optimal_bandwidth(variance, bias, n, bias_rate=2, variance_rate=1)
    limits = bandwidth_limits(data, partition, MAIN_ORDER, min_side_count)
    h_n = _clamp(raw, limits, "h_n", zero_bias, clamped)
    details["V_h"] = variance
    details["B_h"] = bias
    logger.info("Main bandwidth h_n=%.6g", h_n)
    return h_n


def select_bandwidths(
    data: RddDataset,
    spec: EstimandSpec = EstimandSpec(),
    kernel: KernelSpec = KernelSpec(),
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
    zero_tol: float = DEFAULT_ZERO_TOL,
    residuals: Residuals = Residuals.INTERCEPT,
) -> BandwidthReport:
    """Run the full pipeline for the linearization of ``spec``."""
    if spec.kind is EstimandKind.UNCONDITIONAL_WALD:
        data = data.pooled()
    partition = build_partition(data, min_side_count)
    details: dict = {"zero_bias": [], "clamped": []}

    raw_c = pilot_bandwidth(data.running[partition.codes >= 0], kernel)
    c_limits = bandwidth_limits(data, partition, CURVATURE_ORDER, min_side_count)
    c_n = _clamp(raw_c, c_limits, "c_n", details["zero_bias"], details["clamped"])

    d = cell_discontinuities(data, partition, MAIN_ORDER, c_n, kernel)
    result = wlate(d, spec, zero_tol)
    coeffs = linearization_coeffs(d, spec, result.beta_hat, zero_tol)
    b_n, d_n = bias_bandwidth(
        data, partition, coeffs, c_n, kernel, residuals, min_side_count, details
    )
    h_n = main_bandwidth(
        data, partition, coeffs, c_n, b_n, kernel, residuals, min_side_count, details
    )
    zero_bias = details.pop("zero_bias")
    clamped = details.pop("clamped")
    return BandwidthReport(
        c_n=c_n,
        d_n=d_n,
        b_n=b_n,
        h_n=h_n,
        constants={key: float(value) for key, value in details.items()},
        zero_bias=zero_bias,
        clamped=clamped,
        estimand=spec.label,
    )
