"""Numerical laboratory for (constrained) martingale problems and resolvent equations."""

__version__ = "0.1.0"
