"""Word-embedding compression toolkit for multi-task NLU models."""

__version__ = "0.1.0"
