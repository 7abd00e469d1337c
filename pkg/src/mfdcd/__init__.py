"""Multimodal frequency-driven change detection at desk scale."""

__version__ = "0.1.0"
