"""Hardware-aware bottom-up network search for single-object detection."""

__version__ = "0.1.0"
