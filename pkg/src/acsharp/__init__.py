"""Numerical laboratory for interface generation in the stochastic Allen-Cahn equation."""

from .errors import AcsharpError
from .reaction import ReactionFunction, cubic, steep, odd_polynomial, validate_reaction, constants

__version__ = "0.1.0"

__all__ = ["AcsharpError", "ReactionFunction", "cubic", "steep", "odd_polynomial",
           "validate_reaction", "constants", "__version__"]
