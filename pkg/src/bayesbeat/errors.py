"""Exception hierarchy shared across the package."""


class BayesBeatError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BayesBeatError, ValueError):
    """An argument has an incompatible shape.

    ``dim`` names the offending dimension (e.g. ``"C_in"`` or ``"length"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class TapeError(BayesBeatError, RuntimeError):
    """Misuse of a gradient tape (e.g. replaying a consumed tape)."""


class ConfigError(BayesBeatError, ValueError):
    """A configuration violates a documented constraint."""


class DataError(BayesBeatError, ValueError):
    """Malformed or inconsistent input data."""


class NumericError(BayesBeatError, ArithmeticError):
    """A computation produced a non-finite value."""
