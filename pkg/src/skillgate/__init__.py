"""Gated, regression-aware editing of bounded skill libraries for tool-using agents."""

__version__ = "0.1.0"
