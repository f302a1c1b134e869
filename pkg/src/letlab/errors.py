"""Shared exception types."""


class LetLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LetLabError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(LetLabError):
    """A forward operation produced NaN or Inf, or a gradient went non-finite."""


class ConfigError(LetLabError):
    """Invalid or unknown configuration value."""


class DataError(LetLabError):
    """Invalid corpus, batch, or token-file contents."""


class CheckpointError(LetLabError):
    """Malformed or inconsistent checkpoint file."""


class DivergenceError(NonFiniteError):
    """Training hit a non-finite loss or gradient; carries the step number."""

    def __init__(self, message, step=None, parameter=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter
