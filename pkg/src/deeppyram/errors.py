"""Exception hierarchy shared across the package."""


class DeepPyramError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepPyramError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(DeepPyramError, ValueError):
    """An operator or model configuration is invalid."""


class DomainError(DeepPyramError, ValueError):
    """Input values lie outside the operation's domain."""


class UsageError(DeepPyramError, RuntimeError):
    """An API was called in an unsupported way."""


class DataError(DeepPyramError, OSError):
    """Dataset files are missing, unpaired or malformed."""


class NumericalError(DeepPyramError, ArithmeticError):
    """A non-finite value appeared during optimization."""
