"""Exception hierarchy shared by all sepuq modules."""


class SepuqError(Exception):
    """Base class for all sepuq errors."""


class ValidationError(SepuqError, ValueError):
    """Bad input: shapes, ranges or inconsistent configuration."""


class NumericalError(SepuqError, ArithmeticError):
    """A numerical procedure failed (non-convergence, loss of definiteness, overflow)."""
