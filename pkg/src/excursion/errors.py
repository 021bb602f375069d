"""Exception hierarchy.

Two roots: ``ValidationError`` for bad inputs (CLI exit code 1) and
``NumericalError`` for estimands or fits that are undefined on valid inputs
(CLI exit code 2).
"""


class ValidationError(ValueError):
    pass


class ParseError(ValidationError):
    pass


class IncompleteTableError(ValidationError):
    pass


class ProbabilitySumError(ValidationError):
    pass


class UsageError(ValidationError):
    pass


class NumericalError(RuntimeError):
    pass


class UndefinedBlipError(NumericalError):
    pass


class IdentificationError(NumericalError):
    pass


class PositivityError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class NoDataError(NumericalError):
    pass


class NonEnumerableError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass
