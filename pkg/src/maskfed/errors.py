"""Exception types shared across the package."""


class MaskfedError(Exception):
    """Base class for all package errors."""


class DimensionError(MaskfedError):
    """Shape or dtype contract violated by an engine operation."""


class NumericsError(MaskfedError):
    """A non-finite value (NaN/Inf) appeared in an engine buffer."""


class GraphConsumedError(MaskfedError):
    """backward() was called twice on the same graph."""


class LabelError(MaskfedError):
    """A class label fell outside [0, C)."""


class ConfigError(MaskfedError):
    """Invalid configuration value or cross-field constraint."""


class EmptyClientError(MaskfedError):
    """An operation that needs at least one class/sample got none."""
