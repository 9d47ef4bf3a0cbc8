"""Intelligibility enhancement for electrolaryngeal speech: recognition, alignment and synthesis."""

__version__ = "0.1.0"
