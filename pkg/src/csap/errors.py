"""Exception types raised across the package."""


class CSAPError(Exception):
    """Base class for all package errors."""


class ShapeError(CSAPError, ValueError):
    """Tensor extents are inconsistent with an operation."""


class NumericError(CSAPError, ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class ConfigError(CSAPError, ValueError):
    """Invalid configuration value or combination of values."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class GraphStateError(CSAPError, RuntimeError):
    """Backward requested on a tensor without a recorded forward pass."""


class TrainingError(CSAPError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step


class FormatError(CSAPError, ValueError):
    """Malformed tensor file or checkpoint."""
