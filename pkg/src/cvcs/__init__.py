"""Compressive capture and recovery of connected-vehicle telemetry."""

__version__ = "0.1.0"
