"""Compact building meshes from sparse or noisy point clouds."""

__version__ = "0.1.0"
