"""Exception types shared across the package."""


class MetadaptError(Exception):
    """Base class for all metadapt errors."""


class DimensionError(MetadaptError):
    """Tensor shapes do not line up for the requested operation."""


class InputError(MetadaptError):
    """An argument value is outside the operation's domain."""


class UsageError(MetadaptError):
    """The operation was called in a way its contract forbids."""


class StateError(MetadaptError):
    """Mutable state is missing or inconsistent for the requested call."""


class NumericError(MetadaptError):
    """A kernel produced NaN/Inf or training hit a non-finite loss."""


class ConfigError(MetadaptError):
    """A configuration value violates its invariants."""


class DataError(MetadaptError):
    """A dataset violates its invariants or cannot satisfy a request."""


class FormatError(MetadaptError):
    """An on-disk payload is corrupt, truncated, or has a bad version."""


class MetricError(MetadaptError):
    """A metric cannot be computed from the given predictions/labels."""
