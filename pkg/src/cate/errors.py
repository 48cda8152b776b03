"""Exception types shared across the package."""


class CateError(Exception):
    """Base class for all package errors."""


class ValidationError(CateError, ValueError):
    """An input violates a documented precondition."""


class DegenerateAnchorError(ValidationError):
    """Averaged prompt embeddings cancel out to a zero vector."""


class DegenerateInputError(ValidationError):
    """A zero-norm vector was passed where a direction is required."""


class DomainError(ValidationError):
    """An argument lies outside the mathematical domain of a function."""


class ParseError(ValidationError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at position {position})")
        self.position = position


class UndefinedMetricError(ValidationError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class NumericError(CateError, ArithmeticError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} [layer: {layer}]")
        self.layer = layer


class FormatError(CateError):
    """A file on disk does not match its documented binary/JSON layout."""


class ModeMismatchError(CateError):
    """An operation requires model components that the checkpoint's mode lacks."""


class ConfigError(ValidationError):
    """A configuration file is malformed, has unknown keys or invalid values."""


class MissingArtifactError(CateError, LookupError):
    """A referenced file or bag does not exist."""
