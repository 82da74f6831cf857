"""
errors.py — Exception hierarchy shared by every module, and CLI exit codes.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class LabError(Exception):
    """Base class for every error raised by the lab."""

    exit_code = EXIT_CONFIG


class ConfigurationError(LabError, ValueError):
    """Inconsistent dimensions, invalid parameters, unreadable config files."""


class HorizonError(ConfigurationError):
    """Simulation horizon too short for the test signal."""


class DataError(ConfigurationError):
    """Sequences that must be aligned in time are not."""


class TimeIndexError(LabError, IndexError):
    """A quantity was requested before the first time it is defined."""


class NumericalError(LabError, ArithmeticError):
    """Non-finite values or an iteration that failed to converge."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, **diagnostics) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"


class EstimatorDesignError(NumericalError):
    """The filter Riccati iteration did not converge."""


class SynthesisError(NumericalError):
    """The control Riccati iteration did not converge or did not stabilise."""
