"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ParameterError(ValueError):
    """A scalar parameter or config field is outside its valid range."""


class DataError(ValueError):
    """Input data violates a content contract (non-finite, out of range)."""


class FormatError(ValueError):
    """A serialized artifact is malformed or truncated."""


class ConsistencyError(RuntimeError):
    """Two objects that must describe the same model disagree."""
