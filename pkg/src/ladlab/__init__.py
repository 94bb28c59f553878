"""Collider-bias laboratory: biased data generators, a small autodiff stack,
a vector-quantised autoencoder, and the entropy-ascent latent walk that
decouples easy confounders from class labels."""

__version__ = "0.1.0"
