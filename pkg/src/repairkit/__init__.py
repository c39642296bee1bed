"""Retrieval-augmented repair of static-analysis findings in Java and C#."""

__version__ = "0.1.0"
