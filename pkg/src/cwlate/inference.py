"""Bias correction, robust bias-corrected variance and confidence intervals.

A weighted LATE estimate is linearized as

    beta_hat - beta ~ c1' (delta_Y_hat - delta_Y) + c2' (delta_X_hat - delta_X)

and each discontinuity is a difference of independent one-sided intercepts.
Variances are assembled side by side from per-cell sandwich blocks
n^-1 e_s' Gamma^-1 Psi Gamma^-1 e_t computed by :class:`SideCovariance`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np
from scipy import linalg
from scipy.stats import norm

from cwlate.core import (
    DEFAULT_MIN_SIDE_COUNT,
    CellPartition,
    KernelSpec,
    RddDataset,
    build_partition,
)
from cwlate.errors import NonPositiveVariance, SingularGamma, ZeroFirstStage
from cwlate.estimators import (
    DEFAULT_ZERO_TOL,
    EstimandKind,
    EstimandSpec,
    WlateResult,
    instrument_for,
    instrument_strength,
    wlate,
)
from cwlate.localpoly import (
    CellDiscontinuities,
    Residuals,
    Side,
    Variable,
    bias_constants,
    cell_discontinuities,
    factor_block,
    fit_side,
    moment_blocks,
    moment_matrices,
    outcome,
    residual_psi_blocks,
    side_residuals,
)

logger = logging.getLogger(__name__)

DEFAULT_LEVEL = 0.95
BIAS_ORDER = 2
EXACT_FIT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LinearizationCoeffs:
    c: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    g_delta: np.ndarray
    beta_hat: float
    tau_x: float


@dataclass(frozen=True, eq=False)
class RbcEstimate:
    beta_hat: float
    beta_bc: float
    bias_hat: float
    var_conventional: float
    var_rbc: float
    h: float
    b: float
    ci: tuple[float, float]
    level: float = DEFAULT_LEVEL
    result: Optional[WlateResult] = field(default=None, repr=False)
    coeffs: Optional[LinearizationCoeffs] = field(default=None, repr=False)

    @property
    def se(self) -> float:
        return math.sqrt(self.var_rbc)


def critical_value(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError(f"Confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf(1.0 - (1.0 - level) / 2.0))


def _g_delta(
    spec: EstimandSpec, delta_x: np.ndarray, pi: np.ndarray, b: np.ndarray
) -> np.ndarray:
    """Jacobian of c = pi * b with respect to delta_X; diagonal for every built-in kind."""
    kind = spec.kind
    if kind is EstimandKind.CWLATE:
        return np.diag(pi)
    nonzero = b != 0
    diag = np.zeros(len(delta_x))
    if kind in (EstimandKind.AVERAGE, EstimandKind.COUNTERFACTUAL, EstimandKind.WELFARE):
        # b = a / delta_X with a independent of delta_X on the cells that carry weight
        diag[nonzero] = -pi[nonzero] * b[nonzero] / delta_x[nonzero]
    return np.diag(diag)


def linearization_coeffs(
    d: CellDiscontinuities,
    spec: EstimandSpec,
    beta_hat: float,
    zero_tol: float = DEFAULT_ZERO_TOL,
) -> LinearizationCoeffs:
    """Delta-method coefficients of beta_hat with respect to (delta_Y, delta_X)."""
    pi = d.pi_hat
    b = instrument_for(spec, d.delta_y, d.delta_x, pi, zero_tol)
    c = pi * b
    tau_x = float(c @ d.delta_x)
    if tau_x == 0:
        raise ZeroFirstStage()
    g = _g_delta(spec, d.delta_x, pi, b)
    c1 = c / tau_x
    c2 = (g.T @ d.delta_y - beta_hat * (c + g.T @ d.delta_x)) / tau_x
    return LinearizationCoeffs(c=c, c1=c1, c2=c2, g_delta=g, beta_hat=beta_hat, tau_x=tau_x)


class SideCovariance:
    """Per-cell covariances of local polynomial derivative estimates on one side.

    Residuals come from ``fits``, the order-1 fits at the main bandwidth. The
    estimate of mu^(s) from an order-p fit at bandwidth w is
    s! e_s' beta_hat / w^s, so for two such estimates

        Cov = n^-1 s! t! / (w^s v^t) e_s' Gamma_p(w)^-1 Psi(w, v) Gamma_q(v)^-1 e_t.
    """

    def __init__(
        self,
        data: RddDataset,
        partition: CellPartition,
        side: Side,
        fits: Mapping,
        kernel: KernelSpec,
        residuals: Residuals = Residuals.INTERCEPT,
    ):
        self.data = data
        self.partition = partition
        self.side = Side(side)
        self.kernel = kernel
        self.n = partition.n_total
        self.eps = {
            variable: side_residuals(data, partition, fits[(variable, self.side)], residuals)
            for variable in Variable
        }
        self._solves: dict = {}

    @property
    def exact_fit(self) -> bool:
        for variable, eps in self.eps.items():
            scale = max(1.0, float(np.max(np.abs(outcome(self.data, variable)))))
            if np.max(np.abs(eps)) > EXACT_FIT_TOL * scale:
                return False
        return True

    def selector(self, order: int, s: int, bw: float) -> np.ndarray:
        """Rows Gamma_p(bw)^-1 e_s for every cell, shape (m, order + 1)."""
        key = (order, s, bw)
        if key not in self._solves:
            gamma, _ = moment_blocks(
                self.data, self.partition, self.side, order, order + 1, bw, self.kernel
            )
            rows = np.zeros((self.partition.m, order + 1))
            unit = np.zeros(order + 1)
            unit[s] = 1.0
            for j in range(self.partition.m):
                label = self.partition.labels[j]
                lu = factor_block(gamma[j], lambda cond: SingularGamma(self.side.value, label))
                rows[j] = linalg.lu_solve(lu, unit)
            self._solves[key] = rows
        return self._solves[key]

    def cov(self, u: Variable, v: Variable, first: tuple, second: tuple) -> np.ndarray:
        """Covariance of mu_U^(s) and mu_V^(t); ``first`` and ``second`` are (order, s, bw)."""
        order_a, s, bw_a = first
        order_b, t, bw_b = second
        psi = residual_psi_blocks(
            self.data,
            self.partition,
            self.eps[Variable(u)],
            self.eps[Variable(v)],
            order_a,
            order_b,
            bw_a,
            bw_b,
            self.side,
            self.kernel,
        )
        left = self.selector(order_a, s, bw_a)
        right = self.selector(order_b, t, bw_b)
        scale = math.factorial(s) * math.factorial(t) / (bw_a**s * bw_b**t) / self.n
        return scale * np.einsum("jp,jpq,jq->j", left, psi, right)

    def linear_variance(self, w_y: np.ndarray, w_x: np.ndarray, first: tuple, second: tuple):
        """Covariance of sum_j (w_y mu_Y + w_x mu_X) at ``first`` with the same at ``second``."""
        total = 0.0
        for u, wu in ((Variable.Y, w_y), (Variable.X, w_x)):
            for v, wv in ((Variable.Y, w_y), (Variable.X, w_x)):
                total += float(np.sum(wu * wv * self.cov(u, v, first, second)))
        return total


def main_fits(data: RddDataset, partition: CellPartition, h: float, kernel: KernelSpec) -> dict:
    return {
        (variable, side): fit_side(data, partition, variable, side, 1, h, kernel)
        for variable in Variable
        for side in Side
    }


def bias_components(
    data: RddDataset, partition: CellPartition, h: float, b: float, kernel: KernelSpec
) -> dict:
    """Per-side curvature terms mu^(2)(b)/2 for Y and X and the constants B_{1,2}(h)."""
    constants = bias_constants(moment_matrices(data, partition, 1, BIAS_ORDER, h, h, kernel), 1, 2)
    out = {}
    for side in Side:
        curvature = {
            variable: fit_side(data, partition, variable, side, BIAS_ORDER, b, kernel).derivative(2)
            / 2.0
            for variable in Variable
        }
        out[side] = {"curvature": curvature, "constant": constants.side(side)}
    return out


def bias_estimate(
    data: RddDataset,
    partition: CellPartition,
    coeffs: LinearizationCoeffs,
    h: float,
    b: float,
    kernel: KernelSpec,
) -> float:
    """Leading bias coefficient B such that E[beta_hat] - beta ~ h^2 B."""
    components = bias_components(data, partition, h, b, kernel)
    bias = {}
    for variable in Variable:
        plus = components[Side.PLUS]
        minus = components[Side.MINUS]
        bias[variable] = (
            plus["curvature"][variable] * plus["constant"]
            - minus["curvature"][variable] * minus["constant"]
        )
    return float(coeffs.c1 @ bias[Variable.Y] + coeffs.c2 @ bias[Variable.X])


def _variance_parts(
    data: RddDataset,
    partition: CellPartition,
    coeffs: LinearizationCoeffs,
    h: float,
    b: float,
    kernel: KernelSpec,
    residuals: Residuals,
    fits: Optional[Mapping],
) -> tuple[float, float, bool]:
    fits = fits or main_fits(data, partition, h, kernel)
    constants = bias_constants(moment_matrices(data, partition, 1, BIAS_ORDER, h, h, kernel), 1, 2)
    intercept_h = (1, 0, h)
    curvature_b = (BIAS_ORDER, 2, b)
    var_conventional = 0.0
    var_rbc = 0.0
    exact = True
    for side in Side:
        cov = SideCovariance(data, partition, side, fits, kernel, residuals)
        exact = exact and cov.exact_fit
        g1 = coeffs.c1 * constants.side(side)
        g2 = coeffs.c2 * constants.side(side)
        var_l = cov.linear_variance(coeffs.c1, coeffs.c2, intercept_h, intercept_h)
        # Cov(mu(h), mu^(2)(b)) / 2 pairs the intercept weights with the bias weights.
        cross = 0.0
        for u, wu in ((Variable.Y, coeffs.c1), (Variable.X, coeffs.c2)):
            for v, wv in ((Variable.Y, g1), (Variable.X, g2)):
                cross += float(np.sum(wu * wv * cov.cov(u, v, intercept_h, curvature_b))) / 2.0
        var_bias = cov.linear_variance(g1, g2, curvature_b, curvature_b) / 4.0
        var_conventional += var_l
        var_rbc += var_l - 2.0 * h**2 * cross + h**4 * var_bias
    return var_conventional, var_rbc, exact


def rbc_variance(
    data: RddDataset,
    partition: CellPartition,
    coeffs: LinearizationCoeffs,
    h: float,
    b: float,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
    fits: Optional[Mapping] = None,
) -> tuple[float, float]:
    """Return (conventional variance, robust bias-corrected variance) of the estimate."""
    var_conventional, var_rbc, exact = _variance_parts(
        data, partition, coeffs, h, b, kernel, Residuals(residuals), fits
    )
    if exact:
        raise NonPositiveVariance(var_rbc, exact_fit=True)
    if not var_rbc > 0:
        raise NonPositiveVariance(var_rbc, exact_fit=False)
    return var_conventional, var_rbc


def _pooled_inputs(
    data: RddDataset, spec: EstimandSpec, partition: CellPartition, min_side_count: int
) -> tuple[RddDataset, CellPartition]:
    if spec.kind is EstimandKind.UNCONDITIONAL_WALD:
        pooled = data.pooled()
        return pooled, build_partition(pooled, min_side_count)
    return data, partition


def rbc_estimate(
    data: RddDataset,
    partition: CellPartition,
    spec: EstimandSpec,
    h: float,
    b: float,
    level: float = DEFAULT_LEVEL,
    kernel: KernelSpec = KernelSpec(),
    zero_tol: float = DEFAULT_ZERO_TOL,
    residuals: Residuals = Residuals.INTERCEPT,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
) -> RbcEstimate:
    """Debiased estimate beta_hat - h^2 B_hat with its robust confidence interval."""
    z_crit = critical_value(level)
    data, partition = _pooled_inputs(data, spec, partition, min_side_count)
    d = cell_discontinuities(data, partition, 1, h, kernel)
    result = wlate(d, spec, zero_tol)
    coeffs = linearization_coeffs(d, spec, result.beta_hat, zero_tol)
    bias = bias_estimate(data, partition, coeffs, h, b, kernel)
    var_conventional, var_rbc = rbc_variance(
        data, partition, coeffs, h, b, kernel, residuals, fits=d.fits
    )
    beta_bc = result.beta_hat - h**2 * bias
    half = z_crit * math.sqrt(var_rbc)
    return RbcEstimate(
        beta_hat=result.beta_hat,
        beta_bc=beta_bc,
        bias_hat=bias,
        var_conventional=var_conventional,
        var_rbc=var_rbc,
        h=h,
        b=b,
        ci=(beta_bc - half, beta_bc + half),
        level=level,
        result=result,
        coeffs=coeffs,
    )


def cell_standard_errors(
    data: RddDataset,
    d: CellDiscontinuities,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
    zero_tol: float = DEFAULT_ZERO_TOL,
) -> dict[str, np.ndarray]:
    """Conventional standard errors of each cell's discontinuities and conditional LATE."""
    h = d.bandwidth
    fits = d.fits or main_fits(data, d.partition, h, kernel)
    point = (1, 0, h)
    var = {key: np.zeros(d.m) for key in ("yy", "xx", "yx")}
    for side in Side:
        cov = SideCovariance(data, d.partition, side, fits, kernel, residuals)
        var["yy"] += cov.cov(Variable.Y, Variable.Y, point, point)
        var["xx"] += cov.cov(Variable.X, Variable.X, point, point)
        var["yx"] += cov.cov(Variable.Y, Variable.X, point, point)
    late = np.full(d.m, np.nan)
    defined = np.abs(d.delta_x) > zero_tol
    beta = d.delta_y[defined] / d.delta_x[defined]
    late[defined] = (
        var["yy"][defined] - 2 * beta * var["yx"][defined] + beta**2 * var["xx"][defined]
    ) / d.delta_x[defined] ** 2
    return {
        "delta_y": np.sqrt(np.maximum(var["yy"], 0.0)),
        "delta_x": np.sqrt(np.maximum(var["xx"], 0.0)),
        "late": np.sqrt(np.maximum(late, 0.0)),
        "cov_yx": var["yx"],
    }


def remainder_magnitude(
    data: RddDataset,
    d: CellDiscontinuities,
    coeffs: LinearizationCoeffs,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
) -> float:
    """Plug-in size of the second-order term (|beta| Var(tau_X) + |Cov(tau_Y, tau_X)|) / tau_X^2."""
    point = (1, 0, d.bandwidth)
    var_tx = 0.0
    cov_ty_tx = 0.0
    for side in Side:
        cov = SideCovariance(data, d.partition, side, d.fits, kernel, residuals)
        var_tx += float(np.sum(coeffs.c**2 * cov.cov(Variable.X, Variable.X, point, point)))
        cov_ty_tx += float(np.sum(coeffs.c**2 * cov.cov(Variable.Y, Variable.X, point, point)))
    return (abs(coeffs.beta_hat) * var_tx + abs(cov_ty_tx)) / coeffs.tau_x**2


@dataclass(eq=False)
class EstimateReport:
    estimand: str
    h: float
    b: float
    n: int
    labels: list
    pi_hat: list
    delta_y: list
    delta_x: list
    se_delta_y: list
    se_delta_x: list
    se_late: list
    conditional_lates: list
    weights: list
    dropped: list
    flagged: list
    beta_hat: float
    beta_bc: Optional[float] = None
    bias_hat: Optional[float] = None
    var_conventional: Optional[float] = None
    var_rbc: Optional[float] = None
    se: Optional[float] = None
    ci: Optional[tuple[float, float]] = None
    level: float = DEFAULT_LEVEL
    instrument_strength: Optional[float] = None
    remainder: Optional[float] = None
    status: str = "ok"
    selection_on_gains: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            key: (list(value) if isinstance(value, tuple) else value)
            for key, value in self.__dict__.items()
        }


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def _floats(values) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(values, dtype=float)]


def estimate_report(
    data: RddDataset,
    spec: EstimandSpec,
    h: float,
    b: Optional[float] = None,
    kernel: KernelSpec = KernelSpec(),
    level: float = DEFAULT_LEVEL,
    zero_tol: float = DEFAULT_ZERO_TOL,
    residuals: Residuals = Residuals.INTERCEPT,
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT,
    within_bandwidth: bool = False,
) -> EstimateReport:
    """Point estimate, robust inference and cell diagnostics for one bandwidth pair.

    Non-positive variance is reported through ``status`` instead of raised.
    """
    b = h if b is None else b
    if within_bandwidth:
        data = data.restrict(max(h, b))
    partition = build_partition(data, min_side_count)
    fit_data, fit_partition = _pooled_inputs(data, spec, partition, min_side_count)
    d = cell_discontinuities(fit_data, fit_partition, 1, h, kernel)
    ses = cell_standard_errors(fit_data, d, kernel, residuals, zero_tol)
    d = CellDiscontinuities(
        delta_y=d.delta_y,
        delta_x=d.delta_x,
        partition=d.partition,
        bandwidth=d.bandwidth,
        order=d.order,
        fits=d.fits,
        se_delta_y=ses["delta_y"],
        se_delta_x=ses["delta_x"],
    )
    result = wlate(d, spec, zero_tol)
    coeffs = linearization_coeffs(d, spec, result.beta_hat, zero_tol)
    report = EstimateReport(
        estimand=spec.label,
        h=h,
        b=b,
        n=fit_partition.n_total,
        labels=[str(label) for label in fit_partition.labels],
        pi_hat=_floats(fit_partition.pi_hat),
        delta_y=_floats(d.delta_y),
        delta_x=_floats(d.delta_x),
        se_delta_y=_floats(ses["delta_y"]),
        se_delta_x=_floats(ses["delta_x"]),
        se_late=_floats(ses["late"]),
        conditional_lates=_floats(result.conditional_lates),
        weights=_floats(result.weights),
        dropped=[str(c) for c in partition.dropped],
        flagged=[str(fit_partition.labels[j]) for j in result.flagged],
        beta_hat=result.beta_hat,
        level=level,
        instrument_strength=_finite_or_none(
            instrument_strength(result.instrument, d.delta_x, d.pi_hat)
        ),
        remainder=remainder_magnitude(fit_data, d, coeffs, kernel, residuals),
    )
    report.bias_hat = bias_estimate(fit_data, fit_partition, coeffs, h, b, kernel)
    report.beta_bc = result.beta_hat - h**2 * report.bias_hat
    try:
        var_conventional, var_rbc = rbc_variance(
            fit_data, fit_partition, coeffs, h, b, kernel, residuals, fits=d.fits
        )
    except NonPositiveVariance as err:
        report.status = "exact_fit" if err.exact_fit else "non_positive_variance"
        logger.warning("No confidence interval for %s at h=%.6g: %s", spec.label, h, err)
        return report
    half = critical_value(level) * math.sqrt(var_rbc)
    report.var_conventional = var_conventional
    report.var_rbc = var_rbc
    report.se = math.sqrt(var_rbc)
    report.ci = (report.beta_bc - half, report.beta_bc + half)
    return report
