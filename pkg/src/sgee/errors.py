"""Exception types raised across the package."""


class SgeeError(Exception):
    """Base class for all package errors."""


class DataError(SgeeError):
    """Problems with input data."""


class SchemaError(DataError):
    """A required CSV column is missing or misnamed."""


class ValidationError(DataError):
    """A dataset invariant is violated."""


class ParseError(ValidationError):
    """A CSV cell could not be parsed; message carries the row number."""


class ChartDomainError(SgeeError):
    """Reduced parameter lies outside the remove-one-component chart."""


class DegenerateInputError(SgeeError):
    """An input vector is degenerate (e.g. identically zero)."""


class OutOfSupportError(SgeeError):
    """No kernel mass at a smoother evaluation point."""


class BandwidthSelectionError(SgeeError):
    """Cross-validation could not rank any bandwidth."""


class ConditioningError(SgeeError):
    """A matrix is singular or too ill-conditioned to use."""


class EstimationError(SgeeError):
    """A moment estimator has no usable contributions."""


class BoundaryError(SgeeError):
    """Solver hit the chart boundary repeatedly."""


class TuningError(SgeeError):
    """No tuning-grid point produced a usable fit."""

    def __init__(self, message, bic_path=None):
        super().__init__(message)
        self.bic_path = bic_path or []


class StudyError(SgeeError):
    """Too many replications failed in a simulation study."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(SgeeError):
    """Invalid CLI or config-file settings."""
