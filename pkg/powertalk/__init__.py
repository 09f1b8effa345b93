"""Power talk: communication between DC microgrid converters through droop control."""

__version__ = "0.1.0"
