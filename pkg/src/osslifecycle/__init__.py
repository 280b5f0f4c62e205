"""Lifecycle-stage prediction for open-source repositories."""

__version__ = "0.1.0"
