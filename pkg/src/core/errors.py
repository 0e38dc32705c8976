"""Common error types for FlexiCT."""


class FlexiCTError(Exception):
    """Base class for all FlexiCT errors."""
    pass


class ValidationError(FlexiCTError):
    """Raised when data validation fails."""
    pass


class FormatError(FlexiCTError):
    """Raised when a file or container layout is violated."""
    pass


class CompressionError(FlexiCTError):
    """Raised when compression or decompression fails."""
    pass


class ConfigError(FlexiCTError):
    """Raised when a configuration file has unknown keys or mistyped values."""

    def __init__(self, message: str, key: str = "", expected: str = ""):
        super().__init__(message)
        self.key = key
        self.expected = expected


class DivergenceError(FlexiCTError):
    """Raised when an objective becomes NaN or infinite."""

    def __init__(self, message: str, step: int = -1, components: dict = None):
        super().__init__(message)
        self.step = step
        self.components = dict(components or {})
