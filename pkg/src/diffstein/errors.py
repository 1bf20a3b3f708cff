"""Exception types raised across the package."""


class DiffSteinError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffSteinError, ValueError):
    """Bad identifiers, hyperparameters, or experiment settings."""


class DomainError(DiffSteinError, ValueError):
    """A parameter or point lies outside the admissible domain."""


class NumericalError(DiffSteinError, ArithmeticError):
    """Non-finite values or failed factorizations."""


class SingularDiffusionError(NumericalError):
    """The diffusion matrix is (numerically) singular at a query point."""


class SingularMatrixError(NumericalError):
    """A matrix that must be inverted is singular beyond regularization.

    Attributes
    ----------
    min_eig : float
        Smallest eigenvalue of the offending (symmetrized) matrix.
    """

    def __init__(self, message, min_eig=float("nan")):
        super().__init__(message)
        self.min_eig = min_eig
