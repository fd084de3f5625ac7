"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class KmdError(Exception):
    """Base class for all kmdtool errors."""

    exit_code = 1


class DataError(KmdError, ValueError):
    """Input data violates a precondition (shape, ordering, range, alignment)."""

    exit_code = 3


class IncomparableError(DataError):
    """Two decompositions cover different windows or data dimensions."""


class NumericalError(KmdError, ArithmeticError):
    """A decomposition or evaluation failed numerically."""

    exit_code = 4
