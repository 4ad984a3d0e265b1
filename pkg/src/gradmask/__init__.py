"""Gradient-attention guided dual masking for contrastive caption-image learning."""

__version__ = "0.1.0"
