from __future__ import annotations


class FadingError(Exception):
    """Base error; ``exit_code`` is what ``main.py`` returns to the shell."""

    exit_code = 1


class ValidationError(FadingError):
    exit_code = 2


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class DimensionError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ConvergenceError(FadingError):
    exit_code = 3

    def __init__(self, message: str, failing: list[str] | None = None) -> None:
        super().__init__(message)
        self.failing = failing or []


class NumericalError(FadingError):
    exit_code = 4


class DomainError(NumericalError):
    pass


class DegeneratePenaltyError(NumericalError):
    pass


class IndefiniteCovarianceError(NumericalError):
    pass


class InitializationError(NumericalError):
    pass


class EmptyPredictiveError(NumericalError):
    pass


class PriorRejectionError(NumericalError):
    pass


class NumericalWarning(UserWarning):
    """Non-fatal numerical conditions (knot count, divergences, degenerate chains)."""
