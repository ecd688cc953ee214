"""Simulation toolkit for gate-based error filtration."""

__version__ = "0.1.0"
