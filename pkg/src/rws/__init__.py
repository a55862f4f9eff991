"""Reweighted wake-sleep for deep directed models over binary variables."""

__version__ = "0.1.0"
