"""Exception hierarchy shared across the package."""


class FCDDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FCDDError, ValueError):
    """Invalid architecture, hyperparameter or data-generation settings."""


class UsageError(FCDDError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(FCDDError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class LoadError(FCDDError, OSError):
    """A dataset, image or checkpoint file could not be read."""
