"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, hyper-parameters or input data."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""
