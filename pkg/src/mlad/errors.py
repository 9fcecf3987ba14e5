"""Exception hierarchy; the CLI maps each family to an exit code."""


class MladError(Exception):
    exit_code = 1


class ValidationError(MladError, ValueError):
    """Bad input: shapes, ranges, malformed documents, broken stage chains."""

    exit_code = 1


class DimensionError(ValidationError):
    pass


class NumericalError(MladError, ArithmeticError):
    """Non-finite values or a diverged training loop."""

    exit_code = 2
