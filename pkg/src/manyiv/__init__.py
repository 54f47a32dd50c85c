"""Weak-identification-robust IV inference with many instruments."""

__version__ = "0.1.0"
