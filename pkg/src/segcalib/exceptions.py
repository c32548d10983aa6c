"""Exception hierarchy shared by all segcalib modules."""


class SegcalibError(Exception):
    """Base class for every error raised by this package."""


class GridError(SegcalibError, ValueError):
    """A grid has an invalid shape, dtype, or value domain."""


class ParameterError(SegcalibError, ValueError):
    """An argument value is outside its allowed range."""


class SplitError(SegcalibError, ValueError):
    """A fold split cannot be constructed from the given ids."""


class GenerationError(SegcalibError, RuntimeError):
    """Synthetic subject generation failed (e.g. shape placement)."""


class DataError(SegcalibError, ValueError):
    """A subject is missing data required by the operation."""


class MetricError(SegcalibError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty mask)."""


class DegenerateComparisonError(MetricError):
    """A paired statistical test has no information (all differences zero)."""


class NumericError(SegcalibError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(NumericError):
    """Training diverged. Carries the epoch log collected so far."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


class ConfigError(SegcalibError, ValueError):
    """A run configuration is invalid or inconsistent."""


class FormatError(SegcalibError, ValueError):
    """A stored file does not conform to its container format."""


class CompatibilityError(FormatError):
    """A stored object does not match the expected kind or architecture."""
