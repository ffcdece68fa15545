"""Data model shared by the estimation modules.

An :class:`RddDataset` holds the raw observations, :func:`build_partition` turns
the covariate column into the ordered set of retained cells and
:class:`KernelSpec` describes the kernel used by every local fit.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from cwlate.errors import AllCellsDropped, EmptyDataset, InvalidDataset

logger = logging.getLogger(__name__)

DEFAULT_MIN_SIDE_COUNT = 5


class KernelKind(str, Enum):
    """Supported kernels, all supported on [-1, 1]."""

    TRIANGULAR = "triangular"
    UNIFORM = "uniform"

    @classmethod
    def values(cls) -> list[str]:
        return [kind.value for kind in cls]


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.TRIANGULAR

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", KernelKind(self.kind))
        except ValueError:
            valid = ", ".join(f'"{k}"' for k in KernelKind.values())
            raise ValueError(f"Invalid kernel '{self.kind}'. Valid options: {valid}") from None

    @property
    def support(self) -> tuple[float, float]:
        return (-1.0, 1.0)

    def weights(self, u: np.ndarray) -> np.ndarray:
        """Vectorized kernel evaluation."""
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) <= 1.0
        if self.kind is KernelKind.TRIANGULAR:
            return np.where(inside, 1.0 - np.abs(u), 0.0)
        return np.where(inside, 0.5, 0.0)


def kernel_weight(u: float, spec: KernelSpec) -> float:
    return float(spec.weights(np.asarray([u]))[0])


@dataclass(frozen=True, eq=False)
class RddDataset:
    """Observations of a regression discontinuity design.

    ``x`` is the binary treatment indicator, ``z`` the running variable on its
    original scale and ``cell`` an opaque covariate label per observation.
    Observations with ``z >= cutoff`` belong to the plus side.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    cell: np.ndarray
    cutoff: float = 0.0

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        x = np.array(self.x, dtype=float)
        z = np.array(self.z, dtype=float)
        cell = np.array(self.cell)
        lengths = {len(y), len(x), len(z), len(cell)}
        if len(lengths) != 1:
            raise InvalidDataset(
                f"Observation arrays differ in length: y={len(y)}, x={len(x)}, "
                f"z={len(z)}, cell={len(cell)}"
            )
        if len(y) == 0:
            raise EmptyDataset()
        if not np.isfinite(self.cutoff):
            raise InvalidDataset(f"Cutoff must be finite, got {self.cutoff}")
        if not np.all(np.isfinite(y)):
            raise InvalidDataset("Outcome contains non-finite values")
        if not np.all(np.isfinite(z)):
            raise InvalidDataset("Running variable contains non-finite values")
        if not np.all((x == 0.0) | (x == 1.0)):
            raise InvalidDataset("Treatment must be coded 0/1")
        for name, value in (("y", y), ("x", x), ("z", z), ("cell", cell)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "cutoff", float(self.cutoff))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def running(self) -> np.ndarray:
        """Running variable normalized so that the cutoff is zero."""
        return self.z - self.cutoff

    def subset(self, mask: np.ndarray) -> "RddDataset":
        mask = np.asarray(mask, dtype=bool)
        return RddDataset(
            y=self.y[mask], x=self.x[mask], z=self.z[mask], cell=self.cell[mask], cutoff=self.cutoff
        )

    def restrict(self, h: float) -> "RddDataset":
        """Keep observations within ``h`` of the cutoff."""
        return self.subset(np.abs(self.running) <= h)

    def pooled(self, label: str = "pooled") -> "RddDataset":
        """Same observations with every cell merged into one."""
        return self.with_cells(np.full(self.n, label, dtype=object))

    def with_cells(self, cell: np.ndarray) -> "RddDataset":
        return RddDataset(y=self.y, x=self.x, z=self.z, cell=cell, cutoff=self.cutoff)


@dataclass(frozen=True, eq=False)
class CellPartition:
    labels: tuple
    pi_hat: np.ndarray
    n_left: np.ndarray
    n_right: np.ndarray
    dropped: tuple = ()
    # Per-observation index into ``labels``; -1 marks observations of dropped cells.
    codes: np.ndarray = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def counts(self) -> np.ndarray:
        return self.n_left + self.n_right

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    def members(self, j: int) -> np.ndarray:
        return self.codes == j


def build_partition(
    data: RddDataset, min_side_count: int = DEFAULT_MIN_SIDE_COUNT
) -> CellPartition:
    """Order the cells and drop those without overlap at the cutoff.

    A cell is retained only when it has at least ``min_side_count`` observations
    on each side. Shares are renormalized over the retained cells.
    """
    if data is None or data.n == 0:
        raise EmptyDataset()
    if min_side_count < 1:
        raise ValueError(f"min_side_count must be at least 1, got {min_side_count}")

    labels, inverse = np.unique(data.cell, return_inverse=True)
    inverse = inverse.reshape(-1)
    plus = data.running >= 0.0
    n_right_all = np.bincount(inverse[plus], minlength=len(labels))
    n_left_all = np.bincount(inverse[~plus], minlength=len(labels))

    keep = (n_left_all >= min_side_count) & (n_right_all >= min_side_count)
    dropped = tuple(label.item() if hasattr(label, "item") else label for label in labels[~keep])
    if not keep.any():
        raise AllCellsDropped(list(dropped))
    if dropped:
        logger.warning(
            "Dropping %d cell(s) without overlap at the cutoff: %s",
            len(dropped),
            ", ".join(str(c) for c in dropped),
        )

    new_index = np.full(len(labels), -1, dtype=np.int64)
    new_index[keep] = np.arange(int(keep.sum()))
    codes = new_index[inverse]
    codes.setflags(write=False)

    n_left = n_left_all[keep].astype(np.int64)
    n_right = n_right_all[keep].astype(np.int64)
    counts = n_left + n_right
    pi_hat = counts / counts.sum()

    kept_labels = tuple(label.item() if hasattr(label, "item") else label for label in labels[keep])
    return CellPartition(
        labels=kept_labels,
        pi_hat=pi_hat,
        n_left=n_left,
        n_right=n_right,
        dropped=dropped,
        codes=codes,
    )
