import math

import numpy as np
import pytest
from scipy.integrate import quad

from cwlate.core import CellPartition, KernelKind, KernelSpec, RddDataset, build_partition
from cwlate.errors import InsufficientSupport
from cwlate.localpoly import (
    Residuals,
    Side,
    Variable,
    bias_constants,
    cell_block,
    cell_discontinuities,
    fit_side,
    moment_matrices,
    residual_psi,
    side_residuals,
)

from conftest import simulated, step_dataset

UNIFORM = KernelSpec(KernelKind.UNIFORM)
TRIANGULAR = KernelSpec(KernelKind.TRIANGULAR)


def _direct_wls(z, v, h, p, kernel):
    """Weighted normal equations on raw powers of z."""
    w = kernel.weights(z / h) / h
    keep = w > 0
    r = np.vander(z[keep], p + 1, increasing=True)
    gram = (r * w[keep][:, None]).T @ r
    return np.linalg.solve(gram, (r * w[keep][:, None]).T @ v[keep])


def test_linear_data_reproduced_exactly():
    z = np.linspace(-1, 1, 41)
    y = np.where(z >= 0, 3 + 2 * z, 1 - z)
    data = RddDataset(y=y, x=(z >= 0).astype(float), z=z, cell=np.zeros(len(z)))
    partition = build_partition(data)
    fit = fit_side(data, partition, Variable.Y, Side.PLUS, 1, 0.7, TRIANGULAR)
    np.testing.assert_allclose(fit.coefficients[0], [3.0, 2.0], atol=1e-12)
    d = cell_discontinuities(data, partition, 1, 0.7, TRIANGULAR)
    np.testing.assert_allclose(d.delta_y, [2.0], atol=1e-12)
    np.testing.assert_allclose(d.delta_x, [1.0], atol=1e-12)


def test_three_point_fit():
    z = np.array([-0.3, -0.2, -0.1, 0.1, 0.2, 0.3])
    y = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
    data = RddDataset(y=y, x=(z >= 0).astype(float), z=z, cell=np.zeros(6))
    partition = build_partition(data, min_side_count=1)
    fit = fit_side(data, partition, Variable.Y, Side.PLUS, 1, 1.0, UNIFORM)
    np.testing.assert_allclose(fit.coefficients[0], [0.0, 10.0], atol=1e-12)


def test_step_functions_give_unit_discontinuities():
    data = step_dataset(m=3)
    d = cell_discontinuities(data, build_partition(data), 1, 0.5, TRIANGULAR)
    np.testing.assert_allclose(d.delta_y, np.ones(3), atol=1e-12)
    np.testing.assert_allclose(d.delta_x, np.ones(3), atol=1e-12)

    constant = RddDataset(y=np.full(data.n, 7.0), x=data.x, z=data.z, cell=data.cell)
    d = cell_discontinuities(constant, build_partition(constant), 1, 0.5, TRIANGULAR)
    np.testing.assert_allclose(d.delta_y, np.zeros(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_stacked_fit_matches_per_cell_regressions(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    n = int(rng.integers(100, 501))
    z = rng.uniform(-1, 1, n)
    cell = rng.integers(0, m, n)
    x = (rng.uniform(size=n) < 0.3 + 0.4 * (z >= 0)).astype(float)
    y = 1 + z + 0.5 * z**2 + cell + rng.standard_normal(n)
    data = RddDataset(y=y, x=x, z=z, cell=cell)
    partition = build_partition(data, min_side_count=8)
    p = int(rng.integers(1, 3))
    h = float(rng.uniform(0.9, 1.5))
    kernel = TRIANGULAR if seed % 2 else UNIFORM

    for side in Side:
        fit = fit_side(data, partition, Variable.Y, side, p, h, kernel)
        on_side = z >= 0 if side is Side.PLUS else z < 0
        for j, label in enumerate(partition.labels):
            mask = on_side & (cell == label)
            expected = _direct_wls(z[mask], y[mask], h, p, kernel)
            np.testing.assert_allclose(fit.coefficients[j], expected, rtol=1e-10, atol=1e-10)


def test_insufficient_support():
    z = np.array([-0.9, -0.5, -0.1, 0.05, 0.8, 0.9])
    data = RddDataset(y=np.zeros(6), x=(z >= 0).astype(float), z=z, cell=np.zeros(6))
    partition = build_partition(data, min_side_count=1)
    with pytest.raises(InsufficientSupport):
        fit_side(data, partition, Variable.Y, Side.PLUS, 1, 0.2, UNIFORM)


def test_first_stage_matches_normal_cdf_oracle():
    from scipy.stats import norm

    expected = [norm.cdf(-0.8) - norm.cdf(-1.0), norm.cdf(1.2) - norm.cdf(-1.0)]
    draws = []
    for seed in (1, 2, 3):
        data = simulated(100_000, seed=seed)
        draws.append(cell_discontinuities(data, build_partition(data), 1, 0.5, TRIANGULAR).delta_x)
    # A single draw is noisier than the tolerance; the seed average is not.
    np.testing.assert_allclose(np.mean(draws, axis=0), expected, atol=0.02)


def _dense_design(per_side: int):
    u = (np.arange(per_side) + 0.5) / per_side
    z = np.concatenate([-u, u])
    return RddDataset(y=np.zeros(len(z)), x=(z >= 0).astype(float), z=z, cell=np.zeros(len(z)))


def test_gamma_matches_kernel_integrals():
    data = _dense_design(100_000)
    partition = build_partition(data)
    mom = moment_matrices(data, partition, 1, 2, 1.0, 1.0, UNIFORM)
    gamma = mom.cell_gamma(Side.PLUS, 0)
    expected = 0.5 * np.array([[1, 1 / 2], [1 / 2, 1 / 3]]) * (100_000 / data.n)
    np.testing.assert_allclose(gamma, expected, rtol=0.01)


def test_gamma_is_zero_without_minus_observations():
    z = np.linspace(0.05, 1, 20)
    data = RddDataset(y=z, x=np.ones(20), z=z, cell=np.zeros(20))
    partition = CellPartition(
        labels=(0.0,),
        pi_hat=np.ones(1),
        n_left=np.zeros(1, dtype=np.int64),
        n_right=np.full(1, 20),
        codes=np.zeros(20, dtype=np.int64),
    )
    mom = moment_matrices(data, partition, 1, 2, 1.0, 1.0, UNIFORM)
    np.testing.assert_array_equal(mom.gamma(Side.MINUS), np.zeros((2, 2)))
    assert np.all(np.diag(mom.gamma(Side.PLUS)) > 0)


def test_block_structure_across_cells():
    data = step_dataset(m=2)
    mom = moment_matrices(data, build_partition(data), 1, 2, 0.8, 0.8, TRIANGULAR)
    gamma = mom.gamma(Side.PLUS)
    # stacked index v * m + j; entries pairing different cells vanish
    for a in range(4):
        for b in range(4):
            if a % 2 != b % 2:
                assert gamma[a, b] == 0.0


def _kernel_constant(kernel: KernelSpec, sign: float, l: int, q: int, s: int) -> float:
    def k(u):
        return float(kernel.weights(np.array([u]))[0])

    lo, hi = (0.0, 1.0) if sign > 0 else (-1.0, 0.0)

    def integral(power: int) -> float:
        return quad(lambda u: k(u) * u**power, lo, hi)[0]

    gamma = np.array([[integral(a + b) for b in range(l + 1)] for a in range(l + 1)])
    vartheta = np.array([integral(a + q) for a in range(l + 1)])
    return math.factorial(s) * np.linalg.solve(gamma, vartheta)[s]


@pytest.mark.parametrize("kernel", [UNIFORM, TRIANGULAR])
@pytest.mark.parametrize("l,q,s", [(1, 2, 0), (2, 3, 2), (3, 4, 3)])
def test_bias_constants_match_quadrature(kernel, l, q, s):
    data = _dense_design(50_000)
    partition = build_partition(data)
    constants = bias_constants(moment_matrices(data, partition, l, q, 1.0, 1.0, kernel), l, q, s)
    for side in Side:
        expected = _kernel_constant(kernel, side.sign, l, q, s)
        np.testing.assert_allclose(constants.side(side), [expected], rtol=1e-6, atol=1e-6)


def test_uniform_constant_closed_form():
    data = _dense_design(10_000)
    constants = bias_constants(
        moment_matrices(data, build_partition(data), 1, 2, 1.0, 1.0, UNIFORM), 1, 2
    )
    # e_0' Gamma^-1 vartheta with Gamma = [[1, 1/2], [1/2, 1/3]], vartheta = [1/3, 1/4]
    np.testing.assert_allclose(constants.b_plus, [-1 / 6], atol=1e-7)
    np.testing.assert_allclose(constants.b_minus, constants.b_plus, atol=1e-12)


def test_bias_constants_reject_mismatched_orders():
    data = step_dataset(m=1)
    mom = moment_matrices(data, build_partition(data), 1, 2, 0.8, 0.8, TRIANGULAR)
    with pytest.raises(ValueError, match="requested"):
        bias_constants(mom, 2, 3)


def test_residuals_vanish_on_exact_fit():
    data = step_dataset(m=2)
    partition = build_partition(data)
    d = cell_discontinuities(data, partition, 1, 0.5, TRIANGULAR)
    for side in Side:
        eps = side_residuals(data, partition, d.fits[(Variable.Y, side)])
        np.testing.assert_allclose(eps, 0.0, atol=1e-12)
        psi = residual_psi(
            data, partition, Variable.Y, Variable.Y, 1, 1, 0.5, 0.5, side, d.fits, TRIANGULAR
        )
        np.testing.assert_allclose(psi, 0.0, atol=1e-20)


def test_residual_psi_is_symmetric_psd():
    data = step_dataset(m=2, noise=0.3, per_side=60)
    partition = build_partition(data)
    d = cell_discontinuities(data, partition, 1, 0.6, TRIANGULAR)
    psi = residual_psi(
        data, partition, Variable.X, Variable.Y, 1, 1, 0.6, 0.6, Side.PLUS, d.fits, TRIANGULAR
    )
    np.testing.assert_allclose(psi, 0.0, atol=1e-20)  # X is an exact step
    psi = residual_psi(
        data, partition, Variable.Y, Variable.Y, 1, 1, 0.6, 0.6, Side.PLUS, d.fits, TRIANGULAR
    )
    np.testing.assert_allclose(psi, psi.T, atol=1e-15)
    assert np.min(np.linalg.eigvalsh(psi)) >= -1e-12


def test_residual_psi_matches_noise_variance():
    rng = np.random.default_rng(4)
    per_side = 100_000
    u = (np.arange(per_side) + 0.5) / per_side
    z = np.concatenate([-u, u])
    y = rng.standard_normal(len(z))
    data = RddDataset(y=y, x=(z >= 0).astype(float), z=z, cell=np.zeros(len(z)))
    partition = build_partition(data)
    fits = {
        (Variable.Y, side): fit_side(data, partition, Variable.Y, side, 0, 1.0, UNIFORM)
        for side in Side
    }
    psi = residual_psi(
        data, partition, Variable.Y, Variable.Y, 0, 0, 1.0, 1.0, Side.PLUS, fits, UNIFORM,
        Residuals.INTERCEPT,
    )
    # Half the sample sits on the plus side, where k_h k_b = 0.25.
    np.testing.assert_allclose(psi[0, 0], 0.25 * 0.5, rtol=0.05)


def test_default_psi_uses_intercept_residuals():
    data = simulated(4000, seed=9)
    partition = build_partition(data)
    h, b = 1.0, 1.5
    d = cell_discontinuities(data, partition, 1, h, TRIANGULAR)
    psi = residual_psi(
        data, partition, Variable.Y, Variable.X, 1, 2, h, b, Side.MINUS, d.fits, TRIANGULAR
    )
    z = data.running
    for j in range(partition.m):
        idx = np.flatnonzero((z < 0) & partition.members(j))
        eps_y = data.y[idx] - d.fits[(Variable.Y, Side.MINUS)].intercept[j]
        eps_x = data.x[idx] - d.fits[(Variable.X, Side.MINUS)].intercept[j]
        k = TRIANGULAR.weights(z[idx] / h) / h * TRIANGULAR.weights(z[idx] / b) / b
        left = np.vander(z[idx] / h, 2, increasing=True) * (k * eps_y * eps_x)[:, None]
        expected = left.T @ np.vander(z[idx] / b, 3, increasing=True) / partition.n_total
        block = cell_block(psi, j, partition.m, 2, 3)
        np.testing.assert_allclose(block, expected, rtol=1e-10, atol=1e-14)

    fitted = residual_psi(
        data, partition, Variable.Y, Variable.X, 1, 2, h, b, Side.MINUS, d.fits, TRIANGULAR,
        Residuals.FITTED,
    )
    assert not np.allclose(fitted, psi)
