"""Autoregressive image VAE with discrete Bernoulli latents and an RBM prior."""

__version__ = "0.1.0"
