"""Boundary-aware instance segmentation of tooth point clouds."""

__version__ = "0.1.0"
