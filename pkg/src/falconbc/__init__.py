"""Amortized boundary-condition estimation for 0D cardiovascular models."""

__version__ = "0.1.0"
