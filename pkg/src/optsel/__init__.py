"""Optimizer-aware online data selection via projected gradient matching."""

__version__ = "0.1.0"
