"""Environment configuration for the estimation library, CLI and tool server.

This module handles all environment variable configuration with sensible defaults
and type conversion.
"""

import os
from dataclasses import dataclass
from enum import Enum

from cwlate.core import DEFAULT_MIN_SIDE_COUNT, KernelKind, KernelSpec
from cwlate.localpoly import Residuals


class TransportType(str, Enum):
    """Supported MCP server transport types."""

    STDIO = "stdio"
    HTTP = "http"
    SSE = "sse"

    @classmethod
    def values(cls) -> list[str]:
        """Get all valid transport values."""
        return [transport.value for transport in cls]


class ZScale(str, Enum):
    """How the spread parameter of the simulated running variable is read."""

    SD = "sd"
    VARIANCE = "variance"

    @classmethod
    def values(cls) -> list[str]:
        return [scale.value for scale in cls]


def _choice(var: str, default: str, valid: list[str]) -> str:
    value = (os.getenv(var) or default).lower()
    if value not in valid:
        valid_options = ", ".join(f'"{v}"' for v in valid)
        raise ValueError(f"Invalid {var} '{value}'. Valid options: {valid_options}")
    return value


def _number(var: str, default: str, cast, check, requirement: str):
    raw = os.getenv(var) or default
    try:
        value = cast(raw)
    except ValueError:
        raise ValueError(f"{var} must be {requirement}, got '{raw}'") from None
    if not check(value):
        raise ValueError(f"{var} must be {requirement}, got '{raw}'")
    return value


@dataclass
class EstimationConfig:
    """Defaults for estimation runs.

    Optional environment variables (with defaults):
        CWLATE_KERNEL: "triangular" or "uniform" (default: triangular)
        CWLATE_MIN_SIDE_COUNT: Minimum observations per cell on each side (default: 5)
        CWLATE_ZERO_TOL: Tolerance below which a first stage counts as zero (default: 1e-8)
        CWLATE_LEVEL: Confidence level of reported intervals (default: 0.95)
        CWLATE_RESIDUALS: "fitted" or "intercept" residuals for variances (default: intercept)
    """

    def __init__(self):
        """Initialize the configuration from environment variables."""
        self._validate()

    @property
    def kernel(self) -> KernelSpec:
        kind = _choice("CWLATE_KERNEL", KernelKind.TRIANGULAR.value, KernelKind.values())
        return KernelSpec(kind)

    @property
    def min_side_count(self) -> int:
        return _number(
            "CWLATE_MIN_SIDE_COUNT",
            str(DEFAULT_MIN_SIDE_COUNT),
            int,
            lambda v: v >= 1,
            "a positive integer",
        )

    @property
    def zero_tol(self) -> float:
        return _number("CWLATE_ZERO_TOL", "1e-8", float, lambda v: v > 0, "a positive number")

    @property
    def level(self) -> float:
        return _number("CWLATE_LEVEL", "0.95", float, lambda v: 0 < v < 1, "between 0 and 1")

    @property
    def residuals(self) -> Residuals:
        return Residuals(_choice("CWLATE_RESIDUALS", Residuals.INTERCEPT.value, Residuals.values()))

    def _validate(self) -> None:
        """Read every setting once so that bad values fail at startup.

        Raises:
            ValueError: If any environment variable holds an invalid value.
        """
        for name in ("kernel", "min_side_count", "zero_tol", "level", "residuals"):
            getattr(self, name)


@dataclass
class SimulationConfig:
    """Monte Carlo settings.

    Optional environment variables (with defaults):
        CWLATE_THREADS: Maximum worker threads for replications (default: min(8, cpu count))
        CWLATE_MC_REPS: Default number of replications (default: 1000)
        CWLATE_Z_SCALE: "sd" or "variance" reading of the running-variable spread (default: sd)
    """

    @property
    def threads(self) -> int:
        default = str(min(8, os.cpu_count() or 1))
        return _number("CWLATE_THREADS", default, int, lambda v: v >= 1, "a positive integer")

    @property
    def reps(self) -> int:
        return _number("CWLATE_MC_REPS", "1000", int, lambda v: v >= 1, "a positive integer")

    @property
    def z_scale(self) -> ZScale:
        return ZScale(_choice("CWLATE_Z_SCALE", ZScale.SD.value, ZScale.values()))


@dataclass
class MCPServerConfig:
    """Configuration for MCP server-level settings.

    Optional environment variables (with defaults):
        CWLATE_MCP_SERVER_TRANSPORT: "stdio", "http", or "sse" (default: stdio)
        CWLATE_MCP_BIND_HOST: Bind host for HTTP/SSE (default: 127.0.0.1)
        CWLATE_MCP_BIND_PORT: Bind port for HTTP/SSE (default: 8000)
        CWLATE_MCP_TOOL_TIMEOUT: Estimation tool timeout in seconds (default: 120)
        CWLATE_SIMULATION_ENABLED: Register the Monte Carlo tool (default: false)
    """

    @property
    def server_transport(self) -> str:
        transport = (os.getenv("CWLATE_MCP_SERVER_TRANSPORT") or TransportType.STDIO.value).lower()
        if transport not in TransportType.values():
            valid_options = ", ".join(f'"{t}"' for t in TransportType.values())
            raise ValueError(f"Invalid transport '{transport}'. Valid options: {valid_options}")
        return transport

    @property
    def bind_host(self) -> str:
        return os.getenv("CWLATE_MCP_BIND_HOST") or "127.0.0.1"

    @property
    def bind_port(self) -> int:
        return int(os.getenv("CWLATE_MCP_BIND_PORT") or "8000")

    @property
    def tool_timeout(self) -> int:
        return int(os.getenv("CWLATE_MCP_TOOL_TIMEOUT") or "120")

    @property
    def simulation_enabled(self) -> bool:
        return (os.getenv("CWLATE_SIMULATION_ENABLED") or "false").lower() == "true"


# Global instance placeholders for the singleton pattern
_ESTIMATION_CONFIG_INSTANCE = None
_SIMULATION_CONFIG_INSTANCE = None
_MCP_CONFIG_INSTANCE = None


def get_estimation_config() -> EstimationConfig:
    """
    Gets the singleton instance of EstimationConfig.
    Instantiates it on the first call.
    """
    global _ESTIMATION_CONFIG_INSTANCE
    if _ESTIMATION_CONFIG_INSTANCE is None:
        # Instantiate the config object here, ensuring load_dotenv() has likely run
        _ESTIMATION_CONFIG_INSTANCE = EstimationConfig()
    return _ESTIMATION_CONFIG_INSTANCE


def get_simulation_config() -> SimulationConfig:
    global _SIMULATION_CONFIG_INSTANCE
    if _SIMULATION_CONFIG_INSTANCE is None:
        _SIMULATION_CONFIG_INSTANCE = SimulationConfig()
    return _SIMULATION_CONFIG_INSTANCE


def get_mcp_config() -> MCPServerConfig:
    """Gets the singleton instance of MCPServerConfig."""
    global _MCP_CONFIG_INSTANCE
    if _MCP_CONFIG_INSTANCE is None:
        _MCP_CONFIG_INSTANCE = MCPServerConfig()
    return _MCP_CONFIG_INSTANCE
