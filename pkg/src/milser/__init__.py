"""Weak-label audio classification with multiple instance learning and attention pooling."""

__version__ = "0.1.0"
