"""Geometry-guided gaze estimation: eyeball reconstruction on top of a heatmap network."""

__version__ = "0.1.0"
