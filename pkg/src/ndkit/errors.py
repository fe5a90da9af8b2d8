"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for every error raised by ndkit."""


class ConfigError(ToolkitError, ValueError):
    """A configuration value violates its documented constraints."""


class DataError(ToolkitError, ValueError):
    """Malformed or unusable input data (bad TSV lines, empty corpora)."""


class EmptyInputError(DataError):
    """Text that is empty after whitespace normalization."""


class SequenceTooLongError(DataError):
    """A sequence exceeds the model's maximum length; nothing is truncated silently."""


class ShapeError(ToolkitError, ValueError):
    """Tensor shapes are inconsistent with each other."""


class AlignmentError(ToolkitError, ValueError):
    """Two forward traces do not cover the same targets or validity mask."""


class ArchitectureError(ToolkitError, ValueError):
    """Two models disagree on architecture (layer/head counts, vocab size)."""


class UndefinedMeanError(ToolkitError, ValueError):
    """A mean over zero valid elements was requested."""


class UndefinedMetricError(ToolkitError, ValueError):
    """A metric whose denominator is empty; reported as absent, never as 0."""
