"""Latent-variable multi-fidelity surrogates and cost-aware adaptive sampling."""

__version__ = "0.1.0"
