"""Language-vision discrimination for map-image change detection."""

from lavide.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    LavideError,
    NonFiniteLossError,
    ShapeError,
    SizeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "LavideError",
    "NonFiniteLossError",
    "ShapeError",
    "SizeError",
    "__version__",
]
