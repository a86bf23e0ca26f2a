"""Spectral geometric adversarial attacks on mesh autoencoders."""

__version__ = "0.1.0"
