"""Guided latent-diffusion volumetric super-resolution with progressive distillation."""

__version__ = "0.1.0"
