"""Exception types shared across the package.

The CLI prints ``type(exc).__name__`` as the machine-readable error class, so
these names are part of the command-line contract.
"""


class MCNetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(MCNetError, ValueError):
    pass


class NonFiniteError(MCNetError, ValueError):
    pass


class GradientError(MCNetError, RuntimeError):
    pass


class ConfigError(MCNetError, ValueError):
    pass


class WiringError(ShapeError):
    """An add layer in the cross-fusion table received mismatched tensors."""


class NonFiniteLossError(MCNetError, FloatingPointError):
    def __init__(self, batch_index, value):
        super().__init__(f"non-finite loss {value!r} at batch {batch_index}")
        self.batch_index = batch_index
        self.value = value


class FormatError(MCNetError, ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    pass


class DatasetError(MCNetError, ValueError):
    pass


class CheckpointMismatchError(MCNetError, ValueError):
    pass


class UsageError(MCNetError, ValueError):
    """Bad command-line arguments."""
