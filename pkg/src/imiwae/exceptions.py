"""Exception hierarchy shared across the package."""


class IMIWAEError(Exception):
    """Base class for all package errors."""


class ShapeError(IMIWAEError, ValueError):
    """Array dimensions do not agree with a network or table."""


class DomainError(IMIWAEError, ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(IMIWAEError, FloatingPointError):
    """A computation produced non-finite values."""


class ParseError(IMIWAEError, ValueError):
    """Malformed input file."""


class SpecError(IMIWAEError, ValueError):
    """Invalid declarative specification (missingness, model, experiment)."""


class CalibrationError(IMIWAEError, RuntimeError):
    """Offset calibration could not reach the requested missing rate."""


class TrainingError(IMIWAEError, RuntimeError):
    """Training aborted; ``last_good`` holds the last finite parameters."""

    def __init__(self, message, last_good=None, trace=None):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


class ConfigError(IMIWAEError, ValueError):
    """Experiment configuration failed validation.

    All problems found are collected in ``problems`` rather than stopping at
    the first one.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class AggregationError(IMIWAEError, ValueError):
    """Reports cannot be combined."""
