"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class StateError(RuntimeError):
    """Operation not allowed in the object's current state."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-finite value, quadrature failure, ...)."""
