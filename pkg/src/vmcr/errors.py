"""Exception types shared across the package."""


class VmcrError(Exception):
    """Base class for all package errors."""


class ShapeError(VmcrError):
    """Tensor/array shapes incompatible with the requested operation."""


class ConfigError(VmcrError):
    """Invalid or inconsistent configuration."""


class DataError(VmcrError):
    """Malformed dataset contents (labels, pairing, pixel values)."""


class NumericsError(VmcrError):
    """NaN/Inf surfaced in a computation; never propagated silently."""


class EmptyEvalError(VmcrError):
    """Evaluation requested over zero scoreable pixels/images."""
