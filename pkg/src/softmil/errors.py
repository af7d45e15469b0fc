"""Exception types shared across the package.

The CLI maps each class to a process exit code (see ``softmil.cli``).
"""


class SoftMilError(Exception):
    """Base class for all package errors."""


class ValidationError(SoftMilError, ValueError):
    """Input data violates a documented precondition."""


class ConfigurationError(SoftMilError, ValueError):
    """A configuration is inconsistent with the data it is applied to."""


class NumericalError(SoftMilError, ArithmeticError):
    """A non-finite value showed up during optimization."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class ConvergenceError(SoftMilError, RuntimeError):
    """Raised only when non-convergence has been configured as fatal."""
