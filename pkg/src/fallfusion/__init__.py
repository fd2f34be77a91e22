"""Two-stream radar + vibration fall detection."""

__version__ = "0.1.0"
