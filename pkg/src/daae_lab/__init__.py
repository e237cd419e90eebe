"""Denoising adversarial sequence autoencoders with a numpy autodiff core."""

__version__ = "0.1.0"
