"""Exception hierarchy shared by the library and the CLI.

Each family maps to one CLI exit code (see ``plateflow.cli``).
"""


class PlateflowError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(PlateflowError, ValueError):
    """Invalid configuration or argument values."""


class DataError(PlateflowError):
    """Unreadable, malformed or inconsistent input data."""


class NumericError(PlateflowError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """Raised when training produces a non-finite loss.

    The step index and the last finite loss are kept for diagnostics.
    """

    def __init__(self, message, step=None, last_loss=None):
        super().__init__(message)
        self.step = step
        self.last_loss = last_loss


class CalibrationError(PlateflowError):
    """An objective evaluation failed part way through a threshold sweep."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
