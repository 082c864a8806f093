"""Offline companion tools: instruction-embedding export and metrics plots."""

__version__ = "0.1.0"
