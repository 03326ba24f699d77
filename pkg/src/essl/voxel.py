"""Voxelization into sparse tensors, densification and bird's-eye-view pooling.

Coordinates are integer ``(ix, iy, iz)`` triples held in numpy; features are
torch tensors so that the same containers carry autograd-tracked activations
through the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geom import PointCloud

COUNT_NORMALIZER = 16
DENSE_CELL_CAP = 1 << 26


@dataclass(frozen=True)
class VoxelGridConfig:
    range_min: tuple[float, float, float] = (-8.0, -8.0, -2.0)
    range_max: tuple[float, float, float] = (8.0, 8.0, 2.0)
    voxel_size: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        for name in ("range_min", "range_max", "voxel_size"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(x) for x in v):
                raise ValueError(f"{name} must be three finite numbers")
            object.__setattr__(self, name, v)
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise ValueError("range_max must exceed range_min on every axis")
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel_size must be positive")

    @classmethod
    def kitti_ffov(cls) -> VoxelGridConfig:
        return cls((0.0, -40.0, -3.0), (70.4, 40.0, 1.0), (0.8, 0.8, 0.4))

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D_x, D_y, D_z)."""
        return tuple(
            int(math.ceil((hi - lo) / s))
            for lo, hi, s in zip(self.range_min, self.range_max, self.voxel_size)
        )

    def linear_index(self, coords: np.ndarray) -> np.ndarray:
        """Row-major key over (ix, iy, iz); sorting keys sorts coords lexicographically."""
        _, dy, dz = self.dims
        c = np.asarray(coords, dtype=np.int64)
        return (c[:, 0] * dy + c[:, 1]) * dz + c[:, 2]

    def in_bounds(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords)
        return np.all((c >= 0) & (c < np.asarray(self.dims)), axis=1)


class NonFiniteFeatures(ValueError):
    """A feature tensor holds NaN or infinity."""


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    """Occupied voxel coordinates with one feature row per coordinate."""

    coords: np.ndarray
    features: torch.Tensor
    grid: VoxelGridConfig

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)
        if self.features.ndim != 2 or self.features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"{coords.shape[0]} coords but features of shape {tuple(self.features.shape)}"
            )
        if not self.grid.in_bounds(coords).all():
            raise ValueError("voxel coordinates outside the grid")
        if np.unique(self.grid.linear_index(coords)).size != coords.shape[0]:
            raise ValueError("voxel coordinates must be unique")
        if not bool(torch.isfinite(self.features.detach()).all()):
            raise NonFiniteFeatures("voxel features must be finite")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: torch.Tensor) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.coords, features, self.grid)

    def shifted(self, offset) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.coords + np.asarray(offset, dtype=np.int64), self.features, self.grid)


@dataclass(frozen=True, eq=False)
class BEVMap:
    """Dense (H, W, C) map with H = D_y rows and W = D_x columns."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"BEV map must be (H, W, C), got {tuple(self.data.shape)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def voxelize(
    cloud: PointCloud, grid: VoxelGridConfig
) -> tuple[SparseVoxelTensor, np.ndarray]:
    """Assign points to voxels and build the initial 4-channel voxel features.

    Features are the mean offset of member points from the voxel center (3) and
    ``min(count, 16) / 16`` (1). Voxels come out sorted lexicographically.

    Returns:
        The tensor and an (N,) int64 map from point to voxel row, ``-1`` for
        points outside the grid.
    """
    pts = cloud.points
    lo = np.asarray(grid.range_min)
    size = np.asarray(grid.voxel_size)
    idx = np.floor((pts - lo) / size).astype(np.int64)
    keep = grid.in_bounds(idx) if len(pts) else np.zeros(0, dtype=bool)
    point_to_voxel = np.full(len(pts), -1, dtype=np.int64)
    if not keep.any():
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), torch.zeros(0, 4, dtype=torch.float64), grid), point_to_voxel

    kept = np.flatnonzero(keep)
    keys = grid.linear_index(idx[kept])
    uniq, inverse = np.unique(keys, return_inverse=True)
    point_to_voxel[kept] = inverse
    n_vox = uniq.size
    coords = np.empty((n_vox, 3), dtype=np.int64)
    coords[inverse] = idx[kept]

    offsets = pts[kept] - (lo + (idx[kept] + 0.5) * size)
    counts = np.bincount(inverse, minlength=n_vox).astype(np.float64)
    feats = np.empty((n_vox, 4))
    for axis in range(3):
        feats[:, axis] = np.bincount(inverse, weights=offsets[:, axis], minlength=n_vox) / counts
    feats[:, 3] = np.minimum(counts, COUNT_NORMALIZER) / COUNT_NORMALIZER
    return SparseVoxelTensor(coords, torch.from_numpy(feats), grid), point_to_voxel


def densify(t: SparseVoxelTensor, max_cells: int = DENSE_CELL_CAP) -> torch.Tensor:
    """Scatter into a dense (D_z, H, W, C) tensor of zeros."""
    dx, dy, dz = t.grid.dims
    if dx * dy * dz * t.channels > max_cells:
        raise MemoryError(
            f"dense volume of {dx * dy * dz * t.channels} values exceeds cap {max_cells}"
        )
    dense = t.features.new_zeros((dz, dy, dx, t.channels))
    c = torch.from_numpy(t.coords)
    dense[c[:, 2], c[:, 1], c[:, 0]] = t.features
    return dense


def sparsify(dense: torch.Tensor, grid: VoxelGridConfig) -> SparseVoxelTensor:
    """Inverse of :func:`densify` for tensors with no all-zero occupied rows."""
    iz, iy, ix = torch.nonzero((dense != 0).any(dim=-1), as_tuple=True)
    coords = torch.stack([ix, iy, iz], dim=1).numpy()
    order = np.argsort(grid.linear_index(coords), kind="stable")
    coords = coords[order]
    feats = dense[coords[:, 2], coords[:, 1], coords[:, 0]]
    return SparseVoxelTensor(coords, feats, grid)


def bev_maxpool(t: SparseVoxelTensor) -> BEVMap:
    """Max over occupied height cells per (iy, ix) column; empty columns are 0."""
    dx, dy, _ = t.grid.dims
    out = t.features.new_zeros((dy * dx, t.channels))
    if len(t):
        cell = torch.from_numpy(t.coords[:, 1] * dx + t.coords[:, 0])
        out = out.scatter_reduce(
            0, cell[:, None].expand(-1, t.channels), t.features, "amax", include_self=False
        )
    return BEVMap(out.reshape(dy, dx, t.channels))
