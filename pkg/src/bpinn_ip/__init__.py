"""Bayesian physics-informed neural networks for imaging inverse problems."""

__version__ = "0.1.0"
