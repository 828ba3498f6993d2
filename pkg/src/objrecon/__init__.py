"""Online object-centric neural reconstruction from posed, masked RGB-D streams."""

__version__ = "0.1.0"
