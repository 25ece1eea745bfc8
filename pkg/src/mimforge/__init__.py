"""Desk-scale masked-image-modeling pre-training toolkit."""

__version__ = "0.1.0"
