"""Exception hierarchy shared by every module.

The CLI maps each class to a process exit code.
"""


class OrcastError(Exception):
    exit_code = 1


class ConfigError(OrcastError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class InputError(OrcastError, ValueError):
    """Inputs are missing, malformed or inconsistent."""

    exit_code = 3


class NumericalError(OrcastError, ArithmeticError):
    """A computation produced non-finite values."""

    exit_code = 4
