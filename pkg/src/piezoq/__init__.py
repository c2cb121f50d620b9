"""Acoustic-loss characterisation for interdigitated piezoelectric resonators."""

__version__ = "0.1.0"
