"""Robust outlier-adjusted mean-shift (ROAMS) estimation for linear Gaussian SSMs."""

__version__ = "0.1.0"
