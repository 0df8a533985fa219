"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class BudgetError(RuntimeError):
    """An exact enumeration would exceed its size budget."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DatasetError(ValueError):
    """A dataset file could not be parsed."""
