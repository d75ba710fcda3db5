"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GenrecError(Exception):
    exit_code = 1


class ConfigError(GenrecError, ValueError):
    """Invalid configuration value or combination."""

    exit_code = 1


class InputError(GenrecError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class NumericError(GenrecError, ArithmeticError):
    """Non-finite values or a failed numerical procedure."""

    exit_code = 3

    def __init__(self, message, layer=None, last_good=None):
        super().__init__(message)
        self.layer = layer
        self.last_good = last_good


class DegenerateFitError(NumericError):
    pass


class InternalError(GenrecError, AssertionError):
    """Broken internal contract (a bug, not a user error)."""

    exit_code = 3
