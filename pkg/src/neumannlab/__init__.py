"""Numerical checks of Neumann semigroup inequalities on flat domains."""

__version__ = "0.1.0"
