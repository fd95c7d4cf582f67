"""Layered transport with flow splitting, on a deterministic network simulator."""

__version__ = "0.1.0"
