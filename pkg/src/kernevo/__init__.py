"""Evolve Gaussian-process kernels as typed expression trees."""

__version__ = "0.1.0"
