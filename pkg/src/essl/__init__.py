"""Equivariant self-supervised pre-training for sparse LiDAR point cloud scenes."""

__version__ = "0.1.0"
