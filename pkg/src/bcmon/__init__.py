"""Blockchain middleware for offline networks, as a deterministic simulation."""

__version__ = "0.1.0"
