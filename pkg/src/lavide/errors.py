"""Exception hierarchy shared by every lavide module."""


class LavideError(Exception):
    """Base class for all package errors."""


class ConfigError(LavideError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(LavideError, ValueError):
    """Tensor or raster dimensions do not line up."""


class SizeError(ShapeError):
    """Spatial size is too small or not a valid multiple."""


class DataError(LavideError, ValueError):
    """Malformed input data (labels, datasets, category names)."""


class NonFiniteLossError(LavideError, FloatingPointError):
    """A loss component became NaN or infinite; training must stop."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class CheckpointError(LavideError):
    """A checkpoint file is unreadable, truncated or of the wrong version."""
