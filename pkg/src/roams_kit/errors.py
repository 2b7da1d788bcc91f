"""Exception hierarchy shared across the package."""


class RoamsError(Exception):
    """Base class for all package errors."""


class InputError(RoamsError, ValueError):
    """Malformed or inconsistent user input."""


class NumericalFailure(RoamsError, ArithmeticError):
    """A covariance lost positive semidefiniteness or became non-finite."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class SingularInnovationError(NumericalFailure):
    """The innovation covariance could not be inverted under the condition guard."""


class NonFiniteObjectiveError(NumericalFailure):
    """A likelihood evaluated to NaN or infinity."""


class InitializationError(RoamsError):
    """The optimizer was started at a point where the objective is not finite."""


class DegenerateGridError(RoamsError):
    """The largest classical Mahalanobis residual does not exceed the grid start."""

    def __init__(self, lambda_max, lambda_min=2.0):
        super().__init__(
            f"lambda_max={lambda_max:.6g} does not exceed lambda_min={lambda_min:.6g}"
        )
        self.lambda_max = lambda_max
        self.lambda_min = lambda_min


class InsufficientDataError(InputError):
    """Too few observed timepoints for the requested operation."""
