"""Dense 3D face flow from two frames: morphable model, rasterizer, annotation, networks, training."""

__version__ = "0.1.0"
