"""Hybrid-ensemble latent-space data assimilation on a Lorenz-96 twin testbed."""

__version__ = "0.1.0"
