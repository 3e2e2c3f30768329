"""Fault localization from runtime traces with per-executable density models."""

__version__ = "0.1.0"
