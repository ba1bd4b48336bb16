"""Pose-guided multi-view multimodal latent diffusion at desk scale."""

__version__ = "0.1.0"
