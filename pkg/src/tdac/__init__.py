"""Trainable deep active contours: differentiable level-set evolution driven by a learned backbone."""

__version__ = "0.1.0"
