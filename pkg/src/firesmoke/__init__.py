"""Fire and smoke detection with an attentive transparency head and burning-intensity metrics."""

__version__ = "0.1.0"
