"""Spatially aligned 2D visual prompt tuning on a desk-scale Vision Transformer."""

__version__ = "0.1.0"
