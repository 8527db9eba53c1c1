"""Curvature-restricted nullspace editing for small feed-forward networks."""

from .errors import (
    CrispeError,
    DimensionError,
    NumericalError,
    ParseError,
    SizeError,
    StateError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CrispeError",
    "DimensionError",
    "NumericalError",
    "ParseError",
    "SizeError",
    "StateError",
    "ValidationError",
    "__version__",
]
