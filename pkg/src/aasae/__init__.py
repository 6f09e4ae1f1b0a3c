"""Augmentation-augmented stochastic autoencoders for self-supervised image representations."""

__version__ = "0.1.0"
