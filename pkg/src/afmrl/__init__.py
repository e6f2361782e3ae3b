"""Attribute-aware multimodal retrieval on a synthetic product universe."""

__version__ = "0.1.0"
