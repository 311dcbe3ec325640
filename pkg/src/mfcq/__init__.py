"""Entropy-regularized mean-field control with common noise (LQ class)."""

__version__ = "0.1.0"
