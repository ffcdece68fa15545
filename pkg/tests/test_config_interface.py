import pytest

from cwlate.core import KernelKind
from cwlate.cwlate_env import EstimationConfig, MCPServerConfig, SimulationConfig, ZScale
from cwlate.localpoly import Residuals


def test_estimation_defaults(monkeypatch: pytest.MonkeyPatch):
    """Test that every estimation setting has a default."""
    for var in (
        "CWLATE_KERNEL",
        "CWLATE_MIN_SIDE_COUNT",
        "CWLATE_ZERO_TOL",
        "CWLATE_LEVEL",
        "CWLATE_RESIDUALS",
    ):
        monkeypatch.delenv(var, raising=False)

    config = EstimationConfig()

    assert config.kernel.kind is KernelKind.TRIANGULAR
    assert config.min_side_count == 5
    assert config.zero_tol == 1e-8
    assert config.level == 0.95
    assert config.residuals is Residuals.INTERCEPT


def test_estimation_overrides(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("CWLATE_KERNEL", "Uniform")
    monkeypatch.setenv("CWLATE_MIN_SIDE_COUNT", "12")
    monkeypatch.setenv("CWLATE_LEVEL", "0.9")
    monkeypatch.setenv("CWLATE_RESIDUALS", "fitted")

    config = EstimationConfig()

    assert config.kernel.kind is KernelKind.UNIFORM
    assert config.min_side_count == 12
    assert config.level == 0.9
    assert config.residuals is Residuals.FITTED


def test_empty_value_means_default(monkeypatch: pytest.MonkeyPatch):
    """Unset user_config fields arrive as empty strings."""
    monkeypatch.setenv("CWLATE_KERNEL", "")
    monkeypatch.setenv("CWLATE_LEVEL", "")
    monkeypatch.setenv("CWLATE_MCP_BIND_PORT", "")

    assert EstimationConfig().kernel.kind is KernelKind.TRIANGULAR
    assert EstimationConfig().level == 0.95
    assert MCPServerConfig().bind_port == 8000


@pytest.mark.parametrize(
    "var,value,message",
    [
        ("CWLATE_KERNEL", "epanechnikov", "Valid options"),
        ("CWLATE_MIN_SIDE_COUNT", "0", "positive integer"),
        ("CWLATE_MIN_SIDE_COUNT", "three", "positive integer"),
        ("CWLATE_LEVEL", "1.5", "between 0 and 1"),
        ("CWLATE_ZERO_TOL", "-1", "positive number"),
        ("CWLATE_RESIDUALS", "raw", "Valid options"),
    ],
)
def test_invalid_estimation_settings_fail_at_startup(
    monkeypatch: pytest.MonkeyPatch, var, value, message
):
    monkeypatch.setenv(var, value)

    with pytest.raises(ValueError, match=message):
        EstimationConfig()


def test_simulation_settings(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("CWLATE_THREADS", "3")
    monkeypatch.setenv("CWLATE_Z_SCALE", "variance")
    monkeypatch.delenv("CWLATE_MC_REPS", raising=False)

    config = SimulationConfig()

    assert config.threads == 3
    assert config.z_scale is ZScale.VARIANCE
    assert config.reps == 1000

    monkeypatch.setenv("CWLATE_THREADS", "0")
    with pytest.raises(ValueError, match="CWLATE_THREADS"):
        _ = config.threads


def test_mcp_server_settings(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("CWLATE_MCP_SERVER_TRANSPORT", "HTTP")
    monkeypatch.setenv("CWLATE_MCP_BIND_PORT", "4200")
    monkeypatch.setenv("CWLATE_SIMULATION_ENABLED", "true")
    monkeypatch.delenv("CWLATE_MCP_BIND_HOST", raising=False)

    config = MCPServerConfig()

    assert config.server_transport == "http"
    assert config.bind_port == 4200
    assert config.bind_host == "127.0.0.1"
    assert config.simulation_enabled is True

    monkeypatch.setenv("CWLATE_MCP_SERVER_TRANSPORT", "websocket")
    with pytest.raises(ValueError, match="Invalid transport"):
        _ = config.server_transport
