"""Sparse latent-transition reasoning on a toy recurrent backbone."""

__version__ = "0.1.0"
