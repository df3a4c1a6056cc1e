"""Exception types raised across the toolkit."""

from __future__ import annotations


class QVLabError(Exception):
    """Base class for every error raised by qvlab."""


class ParameterError(QVLabError, ValueError):
    """A model parameter lies outside its admissible range."""


class DomainError(QVLabError, ValueError):
    """A function argument lies outside the function's domain."""


class ConfigurationError(QVLabError):
    """Inputs are individually valid but do not fit together."""


class RangeError(QVLabError, IndexError):
    """A requested time or window is not covered by the available grid."""


class InsufficientDataError(QVLabError):
    """Too few usable observations for an estimator."""


class OutOfBandError(QVLabError, ValueError):
    """An option price lies on or outside its no-arbitrage band."""

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class RegimeError(QVLabError):
    """An asymptotic formula is being used outside the regime where it is valid."""


class SingularError(QVLabError, ZeroDivisionError):
    """A normalising quantity vanishes."""


class MisuseError(QVLabError):
    """An object was passed to an operation it is not meant for."""


class ParseError(QVLabError, ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConsistencyError(ConfigurationError):
    """Two descriptions of the same quantity disagree."""
