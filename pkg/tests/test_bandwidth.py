import math

import numpy as np
import pytest
from scipy import stats

from cwlate.bandwidth import (
    BandwidthReport,
    bandwidth_limits,
    mse_optimal_bandwidth,
    pilot_bandwidth,
    pilot_constant,
    select_bandwidths,
)
from cwlate.core import KernelKind, KernelSpec, RddDataset, build_partition
from cwlate.errors import DegenerateSample
from cwlate.estimators import EstimandSpec

from conftest import simulated


def test_pilot_constants():
    assert pilot_constant(KernelSpec(KernelKind.TRIANGULAR)) == 2.576
    assert pilot_constant(KernelSpec(KernelKind.UNIFORM)) == 1.843


def test_pilot_bandwidth_formula():
    n = 100_000
    z = stats.norm.ppf((np.arange(n) + 0.5) / n)
    c_n = pilot_bandwidth(z, KernelSpec())
    spread = min(np.std(z, ddof=1), stats.iqr(z) / 1.349)
    assert c_n == pytest.approx(2.576 * spread * n ** (-0.2), rel=1e-12)
    assert c_n == pytest.approx(0.2576, abs=1e-3)


def test_pilot_bandwidth_degenerate():
    with pytest.raises(DegenerateSample):
        pilot_bandwidth(np.ones(10), KernelSpec())
    with pytest.raises(DegenerateSample):
        pilot_bandwidth(np.array([0.3]), KernelSpec())


def test_mse_optimal_bandwidth_homogeneity():
    base = mse_optimal_bandwidth(2.0, 0.7, 1000, bias_rate=1, variance_rate=5)
    assert mse_optimal_bandwidth(32.0, 0.7, 1000, 1, 5) == pytest.approx(base * 16 ** (1 / 7))
    assert mse_optimal_bandwidth(2.0, 0.7, 4000, 1, 5) == pytest.approx(base * 4 ** (-1 / 7))

    h = mse_optimal_bandwidth(2.0, 0.7, 1000, bias_rate=2, variance_rate=1)
    assert mse_optimal_bandwidth(8.0, 0.7, 1000, 2, 1) == pytest.approx(h * 4 ** (1 / 5))
    assert mse_optimal_bandwidth(2.0, 0.7, 32_000, 2, 1) == pytest.approx(h / 2)
    assert h == pytest.approx((2.0 / (4 * 0.7**2 * 1000)) ** (1 / 5))


def test_mse_optimal_bandwidth_edges():
    assert math.isinf(mse_optimal_bandwidth(1.0, 0.0, 100, 2, 1))
    assert mse_optimal_bandwidth(0.0, 1.0, 100, 2, 1) == 0.0


def test_bandwidth_limits():
    z = np.concatenate([-np.arange(1, 11) / 10, np.arange(10) / 10 + 0.05])
    data = RddDataset(y=np.zeros(20), x=(z >= 0).astype(float), z=z, cell=np.zeros(20))
    lower, upper = bandwidth_limits(data, build_partition(data), order=1, min_side_count=5)
    assert lower > 0.5 and lower == pytest.approx(0.5)
    assert upper == pytest.approx(1.95)


def test_select_bandwidths_is_deterministic(dgp_data):
    first = select_bandwidths(dgp_data, EstimandSpec())
    second = select_bandwidths(dgp_data, EstimandSpec())
    assert isinstance(first, BandwidthReport)
    assert first.to_dict() == second.to_dict()
    assert set(first.d_n) == {"Y+", "Y-", "X+", "X-"}
    lower, upper = bandwidth_limits(dgp_data, build_partition(dgp_data), order=1)
    assert lower <= first.h_n <= upper
    assert 0.1 <= first.h_n <= 4.0
    assert first.estimand == "cwlate"


def test_select_bandwidths_pools_for_unconditional(dgp_data):
    report = select_bandwidths(dgp_data, EstimandSpec.parse("unconditional_wald"))
    assert report.estimand == "unconditional_wald"
    assert report.h_n > 0 and report.b_n > 0


def test_selectors_are_scale_consistent():
    data = simulated(4000, seed=9)
    scaled = RddDataset(y=data.y, x=data.x, z=2.0 * data.z, cell=data.cell)
    a = select_bandwidths(data)
    b = select_bandwidths(scaled)
    assert b.c_n == pytest.approx(2 * a.c_n, rel=1e-6)
    assert b.b_n == pytest.approx(2 * a.b_n, rel=1e-6)
    assert b.h_n == pytest.approx(2 * a.h_n, rel=1e-6)


@pytest.mark.slow
def test_bandwidth_rates():
    sizes = [1000, 4000, 16000]
    h, b = [], []
    for n in sizes:
        reports = [select_bandwidths(simulated(n, seed=100 + k)) for k in range(10)]
        h.append(np.mean([r.h_n for r in reports]))
        b.append(np.mean([r.b_n for r in reports]))
    log_n = np.log(sizes)
    assert np.polyfit(log_n, np.log(h), 1)[0] == pytest.approx(-0.2, abs=0.05)
    assert np.polyfit(log_n, np.log(b), 1)[0] == pytest.approx(-1 / 7, abs=0.04)
