"""Minimum diffusion Stein discrepancy estimators for unnormalized models."""

from ._backend import BACKEND_NAME
from .errors import (
    ConfigError,
    DiffSteinError,
    DomainError,
    NumericalError,
    SingularDiffusionError,
    SingularMatrixError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "ConfigError",
    "DiffSteinError",
    "DomainError",
    "NumericalError",
    "SingularDiffusionError",
    "SingularMatrixError",
]
