"""Temporal early-exit spiking neural networks."""

__version__ = "0.1.0"
