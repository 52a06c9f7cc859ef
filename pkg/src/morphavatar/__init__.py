"""Morphable-model conditioned multi-view generation and real-time
triangle-bound Gaussian splat avatars."""

__version__ = "0.1.0"
