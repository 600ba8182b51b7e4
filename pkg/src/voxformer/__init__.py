"""Sparse window 3D attention and coarse-to-fine TSDF reconstruction."""

__version__ = "0.1.0"
