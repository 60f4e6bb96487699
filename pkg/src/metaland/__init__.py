"""Gradient-based meta-learning lab with objective-landscape diagnostics."""

__version__ = "0.1.0"
