"""Exception types raised across the package."""


class UtipipeError(Exception):
    """Base class for all package errors."""


class FormatError(UtipipeError, ValueError):
    """A file or record is malformed."""


class DimensionError(UtipipeError, ValueError):
    """Array or file dimensions do not match what was expected."""


class ValidationError(UtipipeError, ValueError):
    """A value violates a data-model invariant."""


class ParseError(FormatError):
    """A text line could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class InsufficientDataError(UtipipeError, ValueError):
    """Not enough frames or samples for the requested operation."""


class SynchronizationError(UtipipeError, ValueError):
    """Streams on the same clock disagree in length or frame shift."""


class AlignmentFailure(UtipipeError):
    """No complete path exists through an alignment graph."""


class DegenerateTrainingError(UtipipeError):
    """A model component received no training data."""


class DivergenceError(UtipipeError, FloatingPointError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(UtipipeError, ZeroDivisionError):
    """A metric has a zero denominator."""
