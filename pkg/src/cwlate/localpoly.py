"""One-sided local polynomial fits in stacked cell form.

The stacked regressor of observation i is r_p(Z_i/h) kron W_i, where W_i is
the one-hot indicator of its cell. Index ``v * m + j`` of a stacked vector
holds power ``v`` of cell ``j``. Because the indicators are one-hot, every
stacked matrix is block diagonal across cells and all solves happen on the
per-cell (p+1)x(p+1) blocks.

Fits and moment matrices work in the h-rescaled basis r_p(Z/h). Coefficients
reported by :class:`SideFit` are back on the scale of the running variable.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np
from scipy import linalg

from cwlate.core import CellPartition, KernelSpec, RddDataset
from cwlate.errors import InsufficientSupport, SingularDesign, SingularGamma

logger = logging.getLogger(__name__)

SINGULAR_CONDITION = 1e12
MAX_ORDER = 4


class Side(str, Enum):
    PLUS = "plus"
    MINUS = "minus"

    @property
    def sign(self) -> float:
        return 1.0 if self is Side.PLUS else -1.0


class Variable(str, Enum):
    Y = "Y"
    X = "X"


class Residuals(str, Enum):
    """How residuals entering the covariance kernels are formed."""

    INTERCEPT = "intercept"
    FITTED = "fitted"

    @classmethod
    def values(cls) -> list[str]:
        return [r.value for r in cls]


def outcome(data: RddDataset, variable: Variable) -> np.ndarray:
    return data.y if Variable(variable) is Variable.Y else data.x


def kernel_h(z: np.ndarray, h: float, kernel: KernelSpec) -> np.ndarray:
    """k_h(z) = k(z/h)/h."""
    return kernel.weights(z / h) / h


def side_cells(data: RddDataset, partition: CellPartition, side: Side) -> list[np.ndarray]:
    """Observation indices of each retained cell on one side of the cutoff."""
    z = data.running
    on_side = z >= 0.0 if Side(side) is Side.PLUS else z < 0.0
    return [np.flatnonzero(on_side & partition.members(j)) for j in range(partition.m)]


def powers(u: np.ndarray, order: int) -> np.ndarray:
    return np.vander(u, order + 1, increasing=True)


def stack_blocks(blocks: np.ndarray) -> np.ndarray:
    """Lay per-cell blocks of shape (m, P, Q) out in the stacked (mP, mQ) index order."""
    m, rows, cols = blocks.shape
    out = np.zeros((m * rows, m * cols))
    for j in range(m):
        out[np.ix_(j + m * np.arange(rows), j + m * np.arange(cols))] = blocks[j]
    return out


def cell_block(stacked: np.ndarray, j: int, m: int, rows: int, cols: int) -> np.ndarray:
    return stacked[np.ix_(j + m * np.arange(rows), j + m * np.arange(cols))]


def _check_order(p: int) -> None:
    if not 0 <= p <= MAX_ORDER:
        raise ValueError(f"Polynomial order must be between 0 and {MAX_ORDER}, got {p}")


def _check_bandwidth(h: float) -> None:
    if not (np.isfinite(h) and h > 0):
        raise ValueError(f"Bandwidth must be positive and finite, got {h}")


def factor_block(gram: np.ndarray, on_singular) -> tuple:
    """LU-factor a per-cell block, calling ``on_singular(cond)`` when it is ill-conditioned."""
    if not np.any(gram):
        raise on_singular(math.inf)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise on_singular(cond)
    return linalg.lu_factor(gram)


@dataclass(frozen=True, eq=False)
class SideFit:
    """Local polynomial fit of one variable on one side, one row per cell.

    ``coefficients[j, v]`` is the coefficient on z**v, so the v-th derivative at
    the cutoff is ``v! * coefficients[j, v]``.
    """

    side: Side
    order: int
    bandwidth: float
    coefficients: np.ndarray
    variable: Variable

    @property
    def intercept(self) -> np.ndarray:
        return self.coefficients[:, 0]

    def derivative(self, v: int) -> np.ndarray:
        if v > self.order:
            raise ValueError(f"Derivative {v} not available from an order {self.order} fit")
        return math.factorial(v) * self.coefficients[:, v]


@dataclass(frozen=True, eq=False)
class CellDiscontinuities:
    delta_y: np.ndarray
    delta_x: np.ndarray
    partition: CellPartition
    bandwidth: float
    order: int
    fits: Mapping = field(default_factory=dict, repr=False)
    se_delta_y: Optional[np.ndarray] = None
    se_delta_x: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def pi_hat(self) -> np.ndarray:
        return self.partition.pi_hat


@dataclass(frozen=True, eq=False)
class MomentMatrices:
    """Stacked moment matrices on both sides for one (p, q, h, b) combination."""

    order: int
    q: int
    h: float
    b: float
    m: int
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    vartheta_plus: np.ndarray
    vartheta_minus: np.ndarray
    labels: tuple = ()
    psi: dict = field(default_factory=dict, repr=False)

    def gamma(self, side: Side) -> np.ndarray:
        return self.gamma_plus if Side(side) is Side.PLUS else self.gamma_minus

    def vartheta(self, side: Side) -> np.ndarray:
        return self.vartheta_plus if Side(side) is Side.PLUS else self.vartheta_minus

    def cell_gamma(self, side: Side, j: int) -> np.ndarray:
        return cell_block(self.gamma(side), j, self.m, self.order + 1, self.order + 1)

    def cell_vartheta(self, side: Side, j: int) -> np.ndarray:
        return cell_block(self.vartheta(side), j, self.m, self.order + 1, 1)[:, 0]


@dataclass(frozen=True, eq=False)
class BiasConstants:
    b_plus: np.ndarray
    b_minus: np.ndarray
    l: int
    m_order: int
    s: int = 0

    def side(self, side: Side) -> np.ndarray:
        return self.b_plus if Side(side) is Side.PLUS else self.b_minus


def fit_side(
    data: RddDataset,
    partition: CellPartition,
    variable: Variable,
    side: Side,
    p: int,
    h: float,
    kernel: KernelSpec,
) -> SideFit:
    """Weighted least squares of the variable on r_p(Z) kron W on one side."""
    _check_order(p)
    _check_bandwidth(h)
    side = Side(side)
    variable = Variable(variable)
    n = partition.n_total
    z = data.running
    v_all = outcome(data, variable)
    coefficients = np.zeros((partition.m, p + 1))
    rescale = h ** np.arange(p + 1)

    for j, idx in enumerate(side_cells(data, partition, side)):
        w = kernel_h(z[idx], h, kernel)
        active = w > 0.0
        found = int(active.sum())
        label = partition.labels[j]
        if found < p + 1:
            raise InsufficientSupport(label, side.value, p + 1, found)
        r = powers(z[idx][active] / h, p)
        rw = r * w[active][:, None]
        gram = rw.T @ r / n
        rhs = rw.T @ v_all[idx][active] / n
        lu = factor_block(gram, lambda cond: SingularDesign(label, side.value, cond))
        coefficients[j] = linalg.lu_solve(lu, rhs) / rescale

    logger.debug("Fitted %s on %s side: order %d, h=%.6g", variable.value, side.value, p, h)
    return SideFit(side=side, order=p, bandwidth=h, coefficients=coefficients, variable=variable)


def cell_discontinuities(
    data: RddDataset,
    partition: CellPartition,
    p: int,
    h: float,
    kernel: KernelSpec,
) -> CellDiscontinuities:
    fits = {
        (variable, side): fit_side(data, partition, variable, side, p, h, kernel)
        for variable in Variable
        for side in Side
    }
    delta_y = fits[(Variable.Y, Side.PLUS)].intercept - fits[(Variable.Y, Side.MINUS)].intercept
    delta_x = fits[(Variable.X, Side.PLUS)].intercept - fits[(Variable.X, Side.MINUS)].intercept
    return CellDiscontinuities(
        delta_y=delta_y,
        delta_x=delta_x,
        partition=partition,
        bandwidth=h,
        order=p,
        fits=fits,
    )


def moment_blocks(
    data: RddDataset,
    partition: CellPartition,
    side: Side,
    p: int,
    q: int,
    h: float,
    kernel: KernelSpec,
) -> tuple[np.ndarray, np.ndarray]:
    n = partition.n_total
    z = data.running
    gamma = np.zeros((partition.m, p + 1, p + 1))
    vartheta = np.zeros((partition.m, p + 1, 1))
    for j, idx in enumerate(side_cells(data, partition, side)):
        u = z[idx] / h
        w = kernel_h(z[idx], h, kernel)
        r = powers(u, p)
        rw = r * w[:, None]
        gamma[j] = rw.T @ r / n
        vartheta[j, :, 0] = rw.T @ u**q / n
    return gamma, vartheta


def moment_matrices(
    data: RddDataset,
    partition: CellPartition,
    p: int,
    q: int,
    h: float,
    b: float,
    kernel: KernelSpec,
) -> MomentMatrices:
    """Gamma_{+-,p}(h) = X_p'K X_p/n and vartheta_{p,q}(h) = X_p'K S_q/n on both sides."""
    _check_order(p)
    _check_bandwidth(h)
    _check_bandwidth(b)
    stacked = {}
    for side in Side:
        gamma, vartheta = moment_blocks(data, partition, side, p, q, h, kernel)
        stacked[side] = (stack_blocks(gamma), stack_blocks(vartheta))
    return MomentMatrices(
        order=p,
        q=q,
        h=h,
        b=b,
        m=partition.m,
        gamma_plus=stacked[Side.PLUS][0],
        gamma_minus=stacked[Side.MINUS][0],
        vartheta_plus=stacked[Side.PLUS][1],
        vartheta_minus=stacked[Side.MINUS][1],
        labels=partition.labels,
    )


def side_residuals(
    data: RddDataset,
    partition: CellPartition,
    fit: SideFit,
    residuals: Residuals = Residuals.INTERCEPT,
) -> np.ndarray:
    """Residuals of every observation against its cell fit; zero off the fitted side."""
    out = np.zeros(data.n)
    v_all = outcome(data, fit.variable)
    z = data.running
    for j, idx in enumerate(side_cells(data, partition, fit.side)):
        if Residuals(residuals) is Residuals.FITTED:
            fitted = powers(z[idx], fit.order) @ fit.coefficients[j]
        else:
            fitted = fit.coefficients[j, 0]
        out[idx] = v_all[idx] - fitted
    return out


def residual_psi_blocks(
    data: RddDataset,
    partition: CellPartition,
    eps_u: np.ndarray,
    eps_v: np.ndarray,
    p: int,
    q: int,
    h: float,
    b: float,
    side: Side,
    kernel: KernelSpec,
) -> np.ndarray:
    """Per-cell (p+1)x(q+1) blocks of the residual covariance kernel."""
    n = partition.n_total
    z = data.running
    blocks = np.zeros((partition.m, p + 1, q + 1))
    for j, idx in enumerate(side_cells(data, partition, side)):
        zj = z[idx]
        w = kernel_h(zj, h, kernel) * kernel_h(zj, b, kernel) * eps_u[idx] * eps_v[idx]
        blocks[j] = (powers(zj / h, p) * w[:, None]).T @ powers(zj / b, q) / n
    return blocks


def residual_psi(
    data: RddDataset,
    partition: CellPartition,
    U: Variable,
    V: Variable,
    p: int,
    q: int,
    h: float,
    b: float,
    side: Side,
    fits: Mapping,
    kernel: KernelSpec,
    residuals: Residuals = Residuals.INTERCEPT,
) -> np.ndarray:
    """Stacked Psi_{UV,p,q}(h, b) = n^-1 sum X_p X_q' e_U e_V k_h k_b on one side.

    ``fits`` maps each variable (or ``(variable, side)`` pair) to the fit whose
    residuals are used.
    """
    side = Side(side)

    def lookup(variable: Variable) -> SideFit:
        variable = Variable(variable)
        return fits[(variable, side)] if (variable, side) in fits else fits[variable]

    eps_u = side_residuals(data, partition, lookup(U), residuals)
    eps_v = side_residuals(data, partition, lookup(V), residuals)
    blocks = residual_psi_blocks(data, partition, eps_u, eps_v, p, q, h, b, side, kernel)
    return stack_blocks(blocks)


def bias_constants(mom: MomentMatrices, l: int, m_order: int, s: int = 0) -> BiasConstants:
    """s! e_s' Gamma_l^-1 vartheta_{l,m} for every cell on both sides."""
    if mom.order != l or mom.q != m_order:
        raise ValueError(
            f"Moment matrices were built for (p={mom.order}, q={mom.q}), "
            f"requested (l={l}, m={m_order})"
        )
    if not 0 <= s <= l:
        raise ValueError(f"Derivative index {s} outside 0..{l}")
    values = {}
    for side in Side:
        out = np.zeros(mom.m)
        for j in range(mom.m):
            label = mom.labels[j] if mom.labels else j
            lu = factor_block(
                mom.cell_gamma(side, j), lambda cond: SingularGamma(side.value, label)
            )
            out[j] = math.factorial(s) * linalg.lu_solve(lu, mom.cell_vartheta(side, j))[s]
        values[side] = out
    return BiasConstants(
        b_plus=values[Side.PLUS], b_minus=values[Side.MINUS], l=l, m_order=m_order, s=s
    )
