"""Frequency-split score distillation on 3D Gaussian splats."""

__version__ = "0.1.0"

from .scene import Camera, GaussianCloud, ImageBuffer, MaskedImage, orbit_cameras
from .renderer import RenderSettings, rasterize, rasterize_with_gradients

__all__ = [
    "Camera",
    "GaussianCloud",
    "ImageBuffer",
    "MaskedImage",
    "orbit_cameras",
    "RenderSettings",
    "rasterize",
    "rasterize_with_gradients",
]
