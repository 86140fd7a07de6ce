"""Exception hierarchy.

Each class carries the CLI exit code it maps to.
"""


class WvoError(Exception):
    exit_code = 3


class UsageError(WvoError, ValueError):
    """Bad arguments: wrong shapes, wrong family kind, invalid sizes."""

    exit_code = 2


class DataError(WvoError, ValueError):
    """Observations outside the support of the model, malformed files."""

    exit_code = 2


class NumericalError(WvoError, ArithmeticError):
    exit_code = 3


class InitializationError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DegenerateContextError(NumericalError):
    pass


class DegenerateFitError(NumericalError):
    pass
