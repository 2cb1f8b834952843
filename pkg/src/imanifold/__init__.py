"""Density estimation, semantic disentanglement and ELBO purification on image manifolds."""

__version__ = "0.1.0"
