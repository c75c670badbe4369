"""Latent diffusion priors plus an autoregressive mesh-token model."""
from .config import ModelConfig

__all__ = ["ModelConfig"]
