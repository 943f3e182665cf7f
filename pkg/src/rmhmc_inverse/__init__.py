"""Bayesian inversion of a 1D heat-conduction model with Riemannian-manifold MCMC."""

__version__ = "0.1.0"
