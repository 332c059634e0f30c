"""Reaction-conditioned molecular pre-training toolkit."""

__version__ = "0.1.0"
