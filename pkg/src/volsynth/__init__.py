"""Conditional volumetric generative models and the augmentation benchmark harness."""

__version__ = "0.1.0"
