from .bandwidth import BandwidthReport, select_bandwidths
from .core import CellPartition, KernelKind, KernelSpec, RddDataset, build_partition
from .errors import CwlateError
from .estimators import (
    EstimandKind,
    EstimandSpec,
    WlateResult,
    cwlate,
    unconditional_wald,
    wlate,
)
from .inference import EstimateReport, RbcEstimate, estimate_report, rbc_estimate
from .localpoly import cell_discontinuities
from .policy import PolicyEffects, PolicySpec, policy_effects
from .simulation import McConfig, McReport, run_monte_carlo, true_estimands

__all__ = [
    "BandwidthReport",
    "CellPartition",
    "CwlateError",
    "EstimandKind",
    "EstimandSpec",
    "EstimateReport",
    "KernelKind",
    "KernelSpec",
    "McConfig",
    "McReport",
    "PolicyEffects",
    "PolicySpec",
    "RbcEstimate",
    "RddDataset",
    "WlateResult",
    "build_partition",
    "cell_discontinuities",
    "cwlate",
    "estimate_report",
    "policy_effects",
    "rbc_estimate",
    "run_monte_carlo",
    "select_bandwidths",
    "true_estimands",
    "unconditional_wald",
    "wlate",
]
