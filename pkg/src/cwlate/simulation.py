"""Monte Carlo engine for comparing weighted LATE estimators.

Data come from a fuzzy design in which both the first stage and the treatment
effect vary with a discrete covariate W:

    D = 1{Z >= 0}
    X = 1{-1 + 0.2 Z + 0.1 D Z + 1.2 D + alpha D W + U_X > 0}
    Y = 1 + 2 X + 0.3 Z - 0.1 X Z + beta X W + U_Y

with (U_X, U_Y) jointly normal. Each replication draws from its own RNG
stream keyed by the replication index, so results do not depend on how
replications are spread over worker threads.
"""

import concurrent.futures
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from cwlate.bandwidth import select_bandwidths
from cwlate.core import DEFAULT_MIN_SIDE_COUNT, KernelKind, KernelSpec, RddDataset, build_partition
from cwlate.cwlate_env import ZScale, get_simulation_config
from cwlate.errors import CwlateError
from cwlate.estimators import EstimandKind, EstimandSpec, wlate_from_vectors
from cwlate.inference import DEFAULT_LEVEL, rbc_estimate

logger = logging.getLogger(__name__)

ERROR_COVARIANCE = np.array([[1.0, 0.5], [0.5, 2.0]])
Z_SPREAD = 2.0
BINARY_SUPPORT = (-1.0, 1.0)
GRID_SUPPORT = tuple(k / 3.0 for k in (-5, -4, -3, -2, -1, 1, 2, 3, 4, 5))


class Support(str, Enum):
    BINARY = "binary"
    GRID10 = "grid10"

    @property
    def values_(self) -> tuple[float, ...]:
        return BINARY_SUPPORT if self is Support.BINARY else GRID_SUPPORT


class Coarsening(str, Enum):
    SIGN = "sign"


class Target(str, Enum):
    OWN_ESTIMAND = "own_estimand"
    UNCONDITIONAL_LATE = "unconditional_late"


class BandwidthMode(str, Enum):
    FIXED = "fixed"
    AUTO = "auto"
    SHARED = "shared"


class PointEstimate(str, Enum):
    CONVENTIONAL = "conventional"
    BIAS_CORRECTED = "bias_corrected"


@dataclass
class McConfig:
    """Monte Carlo settings.

    ``point`` picks the estimate whose bias, variance and MSE are summarised. The
    default is the conventional estimate, the one the main bandwidth h_n is MSE-optimal
    for; intervals are the robust bias-corrected ones in either case.
    """

    alpha_dw: float = 1.0
    beta_xw: float = 2.0
    n: int = 2000
    reps: int = 1000
    seed: int = 0
    estimands: list[str] = field(default_factory=lambda: ["cwlate", "unconditional_wald"])
    bandwidth_mode: BandwidthMode = BandwidthMode.SHARED
    h: Optional[float] = None
    b: Optional[float] = None
    coarsen: Optional[Coarsening] = None
    target: Target = Target.OWN_ESTIMAND
    support: Support = Support.BINARY
    z_scale: ZScale = ZScale.SD
    kernel: KernelKind = KernelKind.TRIANGULAR
    level: float = DEFAULT_LEVEL
    min_side_count: int = DEFAULT_MIN_SIDE_COUNT
    point: PointEstimate = PointEstimate.CONVENTIONAL
    threads: Optional[int] = None

    def __post_init__(self):
        self.bandwidth_mode = BandwidthMode(self.bandwidth_mode)
        self.coarsen = Coarsening(self.coarsen) if self.coarsen else None
        self.target = Target(self.target)
        self.support = Support(self.support)
        self.z_scale = ZScale(self.z_scale)
        self.kernel = KernelKind(self.kernel)
        self.point = PointEstimate(self.point)
        if self.n < 50:
            raise ValueError(f"Monte Carlo sample size must be at least 50, got {self.n}")
        if self.reps < 1:
            raise ValueError(f"Need at least one replication, got {self.reps}")
        if self.bandwidth_mode is BandwidthMode.FIXED and not (self.h and self.h > 0):
            raise ValueError("Fixed bandwidth mode requires a positive h")
        if not self.estimands:
            raise ValueError("At least one estimand is required")
        # Parse eagerly so that malformed estimands fail before any replication runs.
        _ = self.specs

    @property
    def specs(self) -> list[EstimandSpec]:
        return [
            spec if isinstance(spec, EstimandSpec) else EstimandSpec.parse(spec)
            for spec in self.estimands
        ]

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "McConfig":
        """Build from JSON settings; missing reps and z_scale come from the environment."""
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown simulation settings: {', '.join(unknown)}")
        env = get_simulation_config()
        values = {"reps": env.reps, "z_scale": env.z_scale, **values}
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, Enum):
                out[key] = value.value
        out["estimands"] = [spec.label for spec in self.specs]
        return out


@dataclass(frozen=True, eq=False)
class TrueEstimands:
    beta_u: float
    beta_cw: float
    cells: tuple
    pi: np.ndarray
    delta_x: np.ndarray
    beta: np.ndarray

    @property
    def delta_y(self) -> np.ndarray:
        return self.delta_x * self.beta

    def value(self, spec: EstimandSpec) -> float:
        if spec.kind is EstimandKind.UNCONDITIONAL_WALD:
            return self.beta_u
        return wlate_from_vectors(self.delta_y, self.delta_x, self.pi, spec).beta_hat


@dataclass
class EstimandSummary:
    estimand: str
    target: float
    reps: int
    successes: int
    failures: int
    failure_reasons: dict[str, int]
    mean_estimate: Optional[float]
    bias: Optional[float]
    bias_sq: Optional[float]
    variance: Optional[float]
    mse: Optional[float]
    coverage: Optional[float]
    mean_ci_length: Optional[float]
    mean_h: Optional[float]
    mean_b: Optional[float]


@dataclass
class McReport:
    config: dict[str, Any]
    summaries: list[EstimandSummary]

    def summary(self, estimand: str) -> EstimandSummary:
        for s in self.summaries:
            if s.estimand == estimand:
                return s
        raise KeyError(estimand)

    def to_dict(self) -> dict[str, Any]:
        return {"config": self.config, "estimands": [asdict(s) for s in self.summaries]}

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.summaries:
            row = asdict(s)
            row["failure_reasons"] = ";".join(f"{k}={v}" for k, v in s.failure_reasons.items())
            rows.append(row)
        return pd.DataFrame(rows)


def replication_rng(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep_index,)))


def dgp_outcomes(z, w, u_x, u_y, alpha_dw: float, beta_xw: float) -> tuple[np.ndarray, np.ndarray]:
    """Treatment and outcome given the running variable, covariate and errors."""
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    d = (z >= 0).astype(float)
    index = -1.0 + 0.2 * z + 0.1 * d * z + 1.2 * d + alpha_dw * d * w + np.asarray(u_x)
    x = (index > 0).astype(float)
    y = 1.0 + 2.0 * x + 0.3 * z - 0.1 * x * z + beta_xw * x * w + np.asarray(u_y)
    return y, x


def dgp_sample(cfg: McConfig, rep_index: int) -> RddDataset:
    rng = replication_rng(cfg.seed, rep_index)
    sd = Z_SPREAD if cfg.z_scale is ZScale.SD else math.sqrt(Z_SPREAD)
    z = rng.normal(0.0, sd, cfg.n)
    w = rng.choice(np.asarray(cfg.support.values_), cfg.n)
    u = rng.multivariate_normal(np.zeros(2), ERROR_COVARIANCE, cfg.n)
    y, x = dgp_outcomes(z, w, u[:, 0], u[:, 1], cfg.alpha_dw, cfg.beta_xw)
    return RddDataset(y=y, x=x, z=z, cell=w, cutoff=0.0)


def coarsen_cells(cells: np.ndarray, rule: Optional[Coarsening]) -> np.ndarray:
    if rule is None:
        return cells
    return np.sign(np.asarray(cells, dtype=float))


def true_estimands(
    alpha_dw: float,
    beta_xw: float,
    support: Support = Support.BINARY,
    coarsen: Optional[Coarsening] = None,
) -> TrueEstimands:
    """Population quantities at the cutoff with W uniform over its support."""
    w = np.asarray(Support(support).values_)
    delta_x = norm.cdf(0.2 + alpha_dw * w) - norm.cdf(-1.0)
    beta = 2.0 + beta_xw * w
    cells = tuple(float(v) for v in w)
    pi = np.full(len(w), 1.0 / len(w))
    if coarsen is not None:
        groups = coarsen_cells(w, Coarsening(coarsen))
        cells = tuple(float(g) for g in np.unique(groups))
        cell_dx = np.array([delta_x[groups == g].mean() for g in cells])
        cell_dy = np.array([(delta_x * beta)[groups == g].mean() for g in cells])
        pi = np.array([np.mean(groups == g) for g in cells])
        delta_x, beta = cell_dx, cell_dy / cell_dx
    beta_u = float(np.sum(pi * delta_x * beta) / np.sum(pi * delta_x))
    beta_cw = float(np.sum(pi * delta_x**2 * beta) / np.sum(pi * delta_x**2))
    return TrueEstimands(
        beta_u=beta_u, beta_cw=beta_cw, cells=cells, pi=pi, delta_x=delta_x, beta=beta
    )


@dataclass
class _Draw:
    estimate: Optional[float] = None
    covered: Optional[bool] = None
    ci_length: Optional[float] = None
    h: Optional[float] = None
    b: Optional[float] = None
    failure: Optional[str] = None


def _bandwidths(cfg: McConfig, data: RddDataset, spec: EstimandSpec, kernel: KernelSpec):
    if cfg.bandwidth_mode is BandwidthMode.FIXED:
        return cfg.h, cfg.b or cfg.h
    report = select_bandwidths(data, spec, kernel, cfg.min_side_count)
    return report.h_n, report.b_n


def shared_sample(
    cfg: McConfig, data: RddDataset, kernel: KernelSpec
) -> tuple[RddDataset, tuple[float, float]]:
    """Select (h, b) on the pooled Wald estimator and trim the sample to the shared window.

    The window is |z| <= max(h, b), not |z| <= h: the curvature fit at the pilot
    bandwidth b keeps every observation it has on the full sample. Cell shares are
    computed on the trimmed sample.
    """
    shared = _bandwidths(cfg, data, EstimandSpec(EstimandKind.UNCONDITIONAL_WALD), kernel)
    return data.restrict(max(shared)), shared


def _replicate(cfg: McConfig, specs: list, targets: list, rep_index: int) -> list[_Draw]:
    """One draw per estimand for replication ``rep_index``.

    The recorded estimate is the conventional beta_hat unless ``cfg.point`` asks for
    the bias-corrected one; coverage always refers to the robust interval around
    beta_bc.
    """
    kernel = KernelSpec(cfg.kernel)
    data = dgp_sample(cfg, rep_index)
    if cfg.coarsen is not None:
        data = data.with_cells(coarsen_cells(data.cell, cfg.coarsen))

    shared = None
    if cfg.bandwidth_mode is BandwidthMode.SHARED:
        try:
            data, shared = shared_sample(cfg, data, kernel)
        except CwlateError as err:
            return [_Draw(failure=type(err).__name__) for _ in specs]

    draws = []
    for spec, target in zip(specs, targets):
        try:
            h, b = shared or _bandwidths(cfg, data, spec, kernel)
            partition = build_partition(data, cfg.min_side_count)
            est = rbc_estimate(
                data,
                partition,
                spec,
                h,
                b,
                level=cfg.level,
                kernel=kernel,
                min_side_count=cfg.min_side_count,
            )
        except CwlateError as err:
            draws.append(_Draw(failure=type(err).__name__))
            continue
        point = est.beta_hat if cfg.point is PointEstimate.CONVENTIONAL else est.beta_bc
        lower, upper = est.ci
        draws.append(
            _Draw(
                estimate=point,
                covered=bool(lower <= target <= upper),
                ci_length=upper - lower,
                h=h,
                b=b,
            )
        )
    return draws


def _mean(values: list) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _summarize(label: str, target: float, draws: list[_Draw]) -> EstimandSummary:
    ok = [d for d in draws if d.failure is None]
    reasons: dict[str, int] = {}
    for d in draws:
        if d.failure is not None:
            reasons[d.failure] = reasons.get(d.failure, 0) + 1
    estimates = np.array([d.estimate for d in ok], dtype=float)
    if len(ok):
        mean = float(estimates.mean())
        bias = mean - target
        variance = float(np.mean((estimates - mean) ** 2))
        mse = float(np.mean((estimates - target) ** 2))
    else:
        mean = bias = variance = mse = None
    return EstimandSummary(
        estimand=label,
        target=target,
        reps=len(draws),
        successes=len(ok),
        failures=len(draws) - len(ok),
        failure_reasons=reasons,
        mean_estimate=mean,
        bias=bias,
        bias_sq=None if bias is None else bias**2,
        variance=variance,
        mse=mse,
        coverage=_mean([float(d.covered) for d in ok]),
        mean_ci_length=_mean([d.ci_length for d in ok]),
        mean_h=_mean([d.h for d in ok]),
        mean_b=_mean([d.b for d in ok]),
    )


def run_monte_carlo(cfg: McConfig) -> McReport:
    specs = cfg.specs
    truth = true_estimands(cfg.alpha_dw, cfg.beta_xw, cfg.support, cfg.coarsen)
    if cfg.target is Target.UNCONDITIONAL_LATE:
        targets = [truth.beta_u for _ in specs]
    else:
        targets = [truth.value(spec) for spec in specs]

    threads = cfg.threads or get_simulation_config().threads
    logger.info(
        "Running %d replications of n=%d (alpha=%g, beta=%g) on %d threads",
        cfg.reps,
        cfg.n,
        cfg.alpha_dw,
        cfg.beta_xw,
        threads,
    )
    step = max(1, cfg.reps // 10)
    results: list[list[_Draw]] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [
            executor.submit(_replicate, cfg, specs, targets, rep) for rep in range(cfg.reps)
        ]
        for done, future in enumerate(futures, start=1):
            results.append(future.result())
            if done % step == 0:
                logger.info("Finished %d/%d replications", done, cfg.reps)

    summaries = []
    for k, (spec, target) in enumerate(zip(specs, targets)):
        draws = [rep[k] for rep in results]
        summary = _summarize(spec.label, target, draws)
        if summary.failures:
            logger.warning(
                "%s failed in %d of %d replications: %s",
                spec.label,
                summary.failures,
                cfg.reps,
                summary.failure_reasons,
            )
        summaries.append(summary)
    return McReport(config=cfg.to_dict(), summaries=summaries)


def compare_mse(report: McReport, numerator: str, denominator: str) -> float:
    """MSE ratio of two estimands in the same report."""
    top = report.summary(numerator).mse
    bottom = report.summary(denominator).mse
    if top is None or bottom is None or bottom == 0:
        return float("nan")
    return top / bottom
