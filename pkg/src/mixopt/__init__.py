"""Offline data-mixture optimisation and mixture reuse for evolving domain sets."""

__version__ = "0.1.0"
