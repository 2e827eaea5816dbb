"""Orientation-only 3D human pose estimation at desk scale."""

__version__ = "0.1.0"
