"""Selective state-space fusion of two modalities through a shared transition matrix."""

__version__ = "0.1.0"
