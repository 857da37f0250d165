"""Inference of initial compositions in stiff reacting systems."""

__version__ = "0.1.0"
