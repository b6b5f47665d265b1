"""Exception types shared across the package.

The CLI maps these onto stable exit codes: bad inputs exit 2, numerical
failures exit 3.
"""


class DfctbnError(Exception):
    """Base class for package errors."""


class DataError(DfctbnError, ValueError):
    """Malformed, inconsistent, or out-of-contract input data."""


class NumericalError(DfctbnError, ArithmeticError):
    """A computation left the supported numeric range or lost rank."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its iteration budget."""
