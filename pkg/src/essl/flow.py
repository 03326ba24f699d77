"""Scene flow, point warping and sparse feature warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geom import PointCloud
from .voxel import SparseVoxelTensor, voxelize


@dataclass(frozen=True, eq=False)
class SceneFlow:
    """Per-point displacements (N, 3), index-aligned with the source cloud."""

    displacements: np.ndarray

    def __post_init__(self):
        d = np.array(self.displacements, dtype=np.float64, copy=True)
        if d.ndim == 1 and d.size == 0:
            d = d.reshape(0, 3)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError(f"displacements must have shape (N, 3), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        d.flags.writeable = False
        object.__setattr__(self, "displacements", d)

    def __len__(self) -> int:
        return self.displacements.shape[0]

    def subset(self, indices) -> SceneFlow:
        return SceneFlow(self.displacements[np.asarray(indices, dtype=np.int64)])


def warp_points(cloud: PointCloud, flow: SceneFlow) -> PointCloud:
    if len(flow) != len(cloud):
        raise ValueError(f"flow has {len(flow)} vectors for {len(cloud)} points")
    return cloud.with_points(cloud.points + flow.displacements)


@torch.no_grad()
def warp_features(
    h_prev: SparseVoxelTensor,
    cloud_prev: PointCloud,
    flow: SceneFlow,
    point_to_voxel_prev: np.ndarray,
) -> SparseVoxelTensor:
    """Move voxel features along the flow of their member points.

    Every point that is inside the grid both before and after warping carries the
    feature of its source voxel to the voxel it lands in; each target voxel takes
    the mean over its contributing points. The result is detached from autograd.
    """
    p2v = np.asarray(point_to_voxel_prev, dtype=np.int64)
    if not (len(cloud_prev) == len(flow) == p2v.shape[0]):
        raise ValueError(
            f"length mismatch: cloud {len(cloud_prev)}, flow {len(flow)}, index map {p2v.shape[0]}"
        )
    if p2v.size and p2v.max() >= len(h_prev):
        raise ValueError("index map references voxels beyond the source tensor")

    warped = warp_points(cloud_prev, flow)
    target, p2t = voxelize(warped, h_prev.grid)
    live = np.flatnonzero((p2v >= 0) & (p2t >= 0))
    feats = h_prev.features.detach()
    if live.size == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), feats.new_zeros((0, h_prev.channels)), h_prev.grid)

    used, dest = np.unique(p2t[live], return_inverse=True)
    dest_t = torch.from_numpy(dest)
    sums = feats.new_zeros((used.size, h_prev.channels))
    sums.index_add_(0, dest_t, feats[torch.from_numpy(p2v[live])])
    counts = torch.bincount(dest_t, minlength=used.size).to(feats.dtype)
    return SparseVoxelTensor(target.coords[used], sums / counts[:, None], h_prev.grid)
