"""Sensor-noise generation and detection evaluation for space-object imagery."""

__version__ = "0.1.0"
