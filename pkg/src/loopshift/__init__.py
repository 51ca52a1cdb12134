"""Loop-training laboratory for measuring distribution shift in generative models."""

__version__ = "0.1.0"
