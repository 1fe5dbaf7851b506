"""Trainer worker for the swarmtune evaluation protocol."""

__version__ = "0.1.0"
