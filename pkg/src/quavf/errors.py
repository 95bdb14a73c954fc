"""Exception types shared across the package."""


class QuavfError(Exception):
    """Base class for all package errors."""


class ParseError(QuavfError):
    """A file could not be parsed (malformed manifest, bad score row, ...)."""


class ValidationError(QuavfError):
    """A value or record violates a documented invariant."""


class AlignmentError(QuavfError):
    """Tracks that must share segment id / length do not line up."""


class ConfigError(QuavfError):
    """A configuration value is out of its legal range or inconsistent."""


class MetricError(QuavfError):
    """A metric is undefined for the given inputs (e.g. AP with no positives)."""


class TrainingError(QuavfError):
    """Training aborted (non-finite loss, empty training set, ...)."""
