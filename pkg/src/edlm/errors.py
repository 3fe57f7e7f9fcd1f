"""Exception taxonomy shared by all edlm modules."""


class EdlmError(Exception):
    """Base class for all package errors."""


class ShapeError(EdlmError, ValueError):
    """Tensor or parameter shapes do not line up."""


class InputError(EdlmError, ValueError):
    """Bad user-supplied data: files, records, indices, argument values."""


class ConfigError(EdlmError, ValueError):
    """Inconsistent or invalid configuration / hyperparameters."""


class NumericError(EdlmError, ArithmeticError):
    """A numeric operation produced or received NaN/Inf or a degenerate value."""


class UsageError(EdlmError, RuntimeError):
    """An API was called in a way its contract forbids."""


class FormatError(EdlmError, RuntimeError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(FormatError):
    """A file parsed but its contents contradict its own metadata."""


class SkipSample(EdlmError):
    """Signal that a sample cannot be used (e.g. nothing maskable) and should be skipped."""
