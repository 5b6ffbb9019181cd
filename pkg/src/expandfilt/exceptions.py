"""Exception hierarchy shared by every module."""


class ExpandFiltError(Exception):
    """Base class for all package errors."""


class InputError(ExpandFiltError, ValueError):
    """Malformed or inconsistent input (shapes, ranges, file contents)."""


class UnsupportedError(ExpandFiltError, NotImplementedError):
    """Requested operation has no implementation for the given input."""


class ConditioningError(ExpandFiltError, ArithmeticError):
    """A linear system is singular or too badly conditioned to solve."""


class NumericalError(ExpandFiltError, ArithmeticError):
    """An iterative procedure diverged or produced non-finite values."""
