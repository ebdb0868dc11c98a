"""Region-based semantic segmentation with a differentiable region-to-pixel layer."""

__version__ = "0.1.0"
