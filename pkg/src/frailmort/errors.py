"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""

from __future__ import annotations


class FrailMortError(Exception):
    """Base class for all package errors."""


class ConfigError(FrailMortError, ValueError):
    """Invalid run configuration."""


class DataError(FrailMortError, ValueError):
    """Problem with input data (format, coverage or content)."""


class ParseError(DataError):
    """Malformed record in an input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructuralError(DataError):
    """Input grid is non-contiguous or does not cover the requested window."""


class CleaningError(DataError):
    """Cell content violates a surface invariant (negative values, deaths without exposure)."""


class NumericalError(FrailMortError, ArithmeticError):
    """Base class for numerical failures."""


class ParameterDomainError(NumericalError, ValueError):
    """Parameter or argument outside the domain of a function."""


class FrailtyOverflowError(NumericalError, OverflowError):
    """Evaluation would overflow double precision."""


class EvaluationError(NumericalError):
    """Likelihood evaluation is undefined (e.g. non-positive rate with deaths)."""


class ConvergenceError(NumericalError):
    """Iterative algorithm failed to converge; carries the objective trace."""

    def __init__(self, message: str, trace=None):
        self.trace = list(trace) if trace is not None else []
        super().__init__(message)


class AlgorithmError(NumericalError):
    """Iterative algorithm misbehaved (e.g. objective decreased); carries the trace."""

    def __init__(self, message: str, trace=None):
        self.trace = list(trace) if trace is not None else []
        super().__init__(message)


class FitError(NumericalError):
    """A model cannot be fitted to the supplied data (e.g. unidentifiable parameters)."""
