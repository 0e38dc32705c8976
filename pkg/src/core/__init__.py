"""Core package."""
# Avoid importing submodules at package import time to prevent circular
# import issues when submodules import other parts of this package.
from .errors import (
    CompressionError,
    ConfigError,
    DivergenceError,
    FlexiCTError,
    FormatError,
    ValidationError,
)

__all__ = [
    'FlexiCTError',
    'CompressionError',
    'ConfigError',
    'DivergenceError',
    'FormatError',
    'ValidationError',
]
