"""Deterministic simulator and benchmark for offset-aware pairing of
asynchronous rotating radar/lidar sweeps."""

__version__ = "0.1.0"
