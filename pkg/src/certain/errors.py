"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, counts, dimensions or missing pipeline inputs."""


class ShapeError(ValueError):
    """Input arrays do not match the dimensions a model was built for."""


class ParseError(ValueError):
    """A serialized record could not be decoded."""

    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class DomainError(ValueError):
    """A numeric argument lies outside the domain of the function."""


class ParameterError(ValueError):
    """Invalid corruption or augmentation parameters."""


class NumericError(ArithmeticError):
    """NaN/inf or an ill-conditioned system encountered during training."""
