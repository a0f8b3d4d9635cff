"""Exception types shared across the package."""


class VigError(Exception):
    """Base class for all package errors."""


class DimensionError(VigError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(VigError, ValueError):
    """A model, training or run configuration violates a constraint."""


class UsageError(VigError, ValueError):
    """An API was called with an argument outside its contract."""


class DataError(VigError, ValueError):
    """A dataset, manifest or label is malformed."""


class FormatError(VigError, ValueError):
    """A tensor container file is malformed.

    ``offset`` is the byte position at which parsing failed, and ``tensor``
    names the record being decoded when the failure happened (if any).
    """

    def __init__(self, message, offset=None, tensor=None):
        parts = [message]
        if tensor is not None:
            parts.append(f"tensor {tensor!r}")
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        super().__init__(", ".join(parts))
        self.offset = offset
        self.tensor = tensor


class TrainingError(VigError, RuntimeError):
    """Training diverged (for instance, a NaN loss)."""
