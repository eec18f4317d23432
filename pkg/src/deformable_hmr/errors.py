"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A configuration value violates a structural constraint."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite or degenerate values."""


class StateError(RuntimeError):
    """An object was used before it held the required state."""


class TrainingError(RuntimeError):
    """Optimization diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
