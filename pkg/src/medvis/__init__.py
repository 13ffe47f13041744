"""Frozen transformer-block insert for 3D ViT segmentation, at desk scale."""

__version__ = "0.1.0"
