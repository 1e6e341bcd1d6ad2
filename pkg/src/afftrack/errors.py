"""Exception types shared across the package."""


class AfftrackError(Exception):
    """Base class for all package errors."""


class DimensionError(AfftrackError):
    """Operand shapes are incompatible."""


class ParameterError(AfftrackError):
    """An argument value is outside its valid range."""


class NumericError(AfftrackError):
    """A computation produced non-finite values or failed numerically."""


class LocalizationError(AfftrackError):
    """A region of interest degenerated (no overlap with the frame)."""


class SamplingError(AfftrackError):
    """A training pair could not be sampled from the video."""


class TrainingError(AfftrackError):
    """Training diverged or was otherwise aborted."""


class StateError(AfftrackError):
    """A model is in the wrong state for the requested operation."""


class MetricError(AfftrackError):
    """A metric is undefined for the given inputs."""


class ConfigError(AfftrackError):
    """A configuration value or file is invalid."""


class MissingDependencyError(AfftrackError):
    """A required input artifact (corpus, checkpoint) is missing."""
