"""Exception hierarchy shared across the package.

Two families matter to callers: invalid input (wrong shapes, broken
preconditions, malformed files) and numerical failure (factorization or
optimizer breakdown).  The command line maps the first family to exit
code 2 and the second to exit code 3.
"""

from __future__ import annotations


class SpatialBiasError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(SpatialBiasError, ValueError):
    """An input violates a documented precondition."""


class DegenerateGeometryError(InvalidArgumentError):
    """Locations are unusable: too few points or coincident coordinates."""


class SchemaError(InvalidArgumentError):
    """A required column is missing from an input table."""


class CsvParseError(InvalidArgumentError):
    """A cell could not be parsed; carries the offending row number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class SingularDesignError(SpatialBiasError):
    """The design matrix is rank deficient; names the collinear columns."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class NumericalError(SpatialBiasError):
    """A factorization or solve failed beyond recoverable jitter."""


class DegenerateFitError(NumericalError):
    """Residual variance collapsed to zero; the likelihood is unbounded."""


class ConvergenceError(NumericalError):
    """Optimizer failed to converge; carries the best iterate found."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class ExperimentError(SpatialBiasError):
    """Too many replicates failed for the summary to be trustworthy."""
