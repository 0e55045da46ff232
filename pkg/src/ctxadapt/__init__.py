"""Test-time adaptation of prototype classifiers in embedding space."""

__version__ = "0.1.0"
