"""Exception hierarchy shared by every module."""


class DoseGPError(Exception):
    """Base class for all package errors."""


class InputError(DoseGPError, ValueError):
    """Invalid user input: shapes, ranges, missing columns, bad config."""


class NumericalError(DoseGPError, ArithmeticError):
    """A linear-algebra operation failed even after jitter escalation."""

    def __init__(self, message, **diagnostics):
        if diagnostics:
            detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.diagnostics = diagnostics


class FittingError(NumericalError):
    """Hyperparameter optimisation failed on every restart."""


class ResourceError(DoseGPError, MemoryError):
    """A computation would exceed the configured memory budget."""


class MetricError(DoseGPError, ValueError):
    """An evaluation metric is undefined for the given input."""


class GenerationError(DoseGPError, RuntimeError):
    """The synthetic generator exhausted its rejection budget."""
