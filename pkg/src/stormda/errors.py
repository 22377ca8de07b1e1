"""Exception hierarchy shared across the package."""


class StormDAError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(StormDAError, ValueError):
    """Invalid configuration or violated precondition."""

    exit_code = 2


class NumericalError(StormDAError, ArithmeticError):
    """Non-finite values, singular systems, or diverging optimisation."""

    exit_code = 3


class CapabilityError(StormDAError, NotImplementedError):
    """The requested operation is not supported by this object."""

    exit_code = 2
