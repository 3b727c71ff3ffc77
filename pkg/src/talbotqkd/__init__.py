"""Simulation and analysis tools for high-dimensional time-bin BB84 with temporal Talbot decoding."""

__version__ = "0.1.0"
