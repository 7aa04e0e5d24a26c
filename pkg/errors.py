"""
Exception Hierarchy for the Cyclone Grid Forecaster.

Every domain error derives from CycloneGridError and from the builtin a
caller would naturally catch, so ``except ValueError`` keeps working.
"""

from typing import Optional, Tuple


class CycloneGridError(Exception):
    """Base class for all forecaster errors."""


class ParseError(CycloneGridError, ValueError):
    """Malformed HURDAT2 input, tagged with the offending line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class GridRangeError(CycloneGridError, ValueError):
    """A position or cell id falls outside the active grid."""

    def __init__(self, axis: str, value: float, bounds: Tuple[float, float]):
        self.axis = axis
        self.value = value
        self.bounds = bounds
        super().__init__(
            f"{axis} {value} outside grid bounds [{bounds[0]}, {bounds[1]})"
        )


class BearingUndefinedError(CycloneGridError, ValueError):
    """Bearing between two coincident positions is undefined."""


class ShapeError(CycloneGridError, ValueError):
    """Tensor or array shapes do not line up."""


class NumericalError(CycloneGridError, ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


class DivergenceError(NumericalError):
    """Training loss became non-finite; carries the last good parameters."""

    def __init__(self, epoch: int, last_good=None, message: Optional[str] = None):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(message or f"training diverged during epoch {epoch}")


class CheckpointError(CycloneGridError, ValueError):
    """A checkpoint or dataset cache could not be read."""


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ExportError(CycloneGridError, OSError):
    """A trajectory could not be written."""


class FetchError(CycloneGridError, OSError):
    """The best-track archive could not be downloaded."""
