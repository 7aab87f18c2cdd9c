"""Desk-scale two-modality latent diffusion with selective state-space scan blocks."""

__version__ = "0.1.0"
