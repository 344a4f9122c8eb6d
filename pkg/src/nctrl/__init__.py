"""Nonstationary temporal representation learning with latent regimes."""

__version__ = "0.1.0"
