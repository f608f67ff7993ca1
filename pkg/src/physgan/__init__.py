"""Physics-model-constrained GAN image restoration."""

__version__ = "0.1.0"
