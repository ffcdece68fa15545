"""Exceptions raised by the estimation library.

Every failure the library can signal derives from :class:`CwlateError` so the
CLI and the tool server can catch one type and map it to an exit status or a
``ToolError``.
"""

from typing import Any, Optional


class CwlateError(Exception):
    """Base class for all estimation errors."""


class InvalidDataset(CwlateError, ValueError):
    """Observation arrays violate the dataset invariants."""


class EmptyDataset(InvalidDataset):
    def __init__(self, message: str = "Dataset has no observations"):
        super().__init__(message)


class SchemaError(CwlateError, ValueError):
    """Input file does not match the expected schema."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        context = []
        if field is not None:
            context.append(f"field '{field}'")
        if line is not None:
            context.append(f"line {line}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class InvalidEstimand(CwlateError, ValueError):
    """Estimand parameters are malformed or do not match the cell count."""


class AllCellsDropped(CwlateError):
    def __init__(self, dropped: list):
        self.dropped = list(dropped)
        super().__init__(
            f"No cell has enough observations on both sides of the cutoff "
            f"(dropped: {', '.join(str(c) for c in self.dropped)})"
        )


class InsufficientSupport(CwlateError):
    def __init__(self, cell: Any, side: str, needed: int, found: int):
        self.cell = cell
        self.side = side
        self.needed = needed
        self.found = found
        super().__init__(
            f"Cell {cell!r} has {found} in-bandwidth observations on the {side} side, "
            f"need at least {needed}"
        )


class SingularDesign(CwlateError):
    def __init__(self, cell: Any, side: str, condition: float):
        self.cell = cell
        self.side = side
        self.condition = condition
        super().__init__(
            f"Weighted design for cell {cell!r} on the {side} side is singular "
            f"(condition number {condition:.3g})"
        )


class SingularGamma(CwlateError):
    def __init__(self, side: str, cell: Any = None):
        self.side = side
        self.cell = cell
        where = f" for cell {cell!r}" if cell is not None else ""
        super().__init__(f"Moment matrix on the {side} side is not invertible{where}")


class ZeroFirstStage(CwlateError):
    def __init__(self, message: str = "Aggregate first-stage discontinuity is zero"):
        super().__init__(message)


class WeakCell(CwlateError):
    def __init__(self, index: int, delta_x: float, zero_tol: float):
        self.index = index
        self.delta_x = delta_x
        super().__init__(
            f"First-stage discontinuity in cell {index} is {delta_x:.3g}, "
            f"within zero tolerance {zero_tol:.3g}"
        )


class SignViolation(CwlateError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"Instrument and first stage have opposite signs in cell {index}")


class DegenerateDenominator(CwlateError):
    def __init__(self, value: float):
        self.value = value
        super().__init__(f"Weighting denominator must be positive, got {value:.6g}")


class NonPositiveVariance(CwlateError):
    def __init__(self, variance: float, exact_fit: bool):
        self.variance = variance
        self.exact_fit = exact_fit
        reason = "data are fit exactly" if exact_fit else "estimated variance is not positive"
        super().__init__(f"Cannot form a confidence interval: {reason} (variance {variance:.6g})")


class DegenerateSample(CwlateError):
    def __init__(self, message: str = "Running variable has zero spread"):
        super().__init__(message)


class NegativeCompliance(CwlateError):
    def __init__(self, index: int, delta_x: float):
        self.index = index
        self.delta_x = delta_x
        super().__init__(f"First-stage discontinuity in cell {index} is negative ({delta_x:.6g})")
