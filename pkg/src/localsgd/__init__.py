"""Unified local SGD: methods, simulation engine, theory and verification."""

__version__ = "0.1.0"
