"""Numerical laboratory for pathwise and Wick-type stochastic calculus over
Gaussian processes."""

__version__ = "0.1.0"
