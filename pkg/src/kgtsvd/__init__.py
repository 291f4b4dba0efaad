"""Tensor SVD for knowledge graphs: factorization, sparsification bounds and an exact simulator of the sampling-based quantum inference algorithm."""

__version__ = "0.1.0"
