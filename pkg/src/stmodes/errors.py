"""Exception types shared across the package."""


class StModesError(Exception):
    """Base class for errors raised by stmodes."""


class InvalidInputError(StModesError, ValueError):
    """Malformed arguments: wrong shapes, non-finite samples, bad lengths."""


class InvalidGraphError(InvalidInputError):
    """A graph that cannot be normalized (e.g. an isolated node)."""


class ConfigError(StModesError, ValueError):
    """Inconsistent or out-of-range configuration."""


class NumericError(StModesError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(NumericError):
    """Training produced a NaN/Inf loss."""
