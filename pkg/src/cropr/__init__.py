"""Learned cross-attention token pruning for toy Vision Transformers."""

__version__ = "0.1.0"
