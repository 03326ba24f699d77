import numpy as np
import pytest
import torch

from essl.flow import SceneFlow, warp_features, warp_points
from essl.geom import PointCloud
from essl.voxel import SparseVoxelTensor, VoxelGridConfig, voxelize

GRID = VoxelGridConfig()
PITCH = np.array(GRID.voxel_size)
LO = np.array(GRID.range_min)


def one_point_per_voxel(rng, n, margin=2):
    dx, dy, dz = GRID.dims
    keys = rng.choice((dx - 2 * margin) * (dy - 2 * margin) * (dz - 2 * margin), size=n, replace=False)
    idx = np.stack(np.unravel_index(keys, (dx - 2 * margin, dy - 2 * margin, dz - 2 * margin)), axis=1) + margin
    jitter = rng.uniform(0.1, 0.9, size=(n, 3))
    return LO + (idx + jitter) * PITCH


def with_random_features(t: SparseVoxelTensor, rng, c=8) -> SparseVoxelTensor:
    return t.with_features(torch.from_numpy(rng.normal(size=(len(t), c))))


def revoxelize_oracle(h_prev, cloud, flow, p2v):
    """Scalar loop: accumulate source features per target voxel key, then average."""
    sums, counts = {}, {}
    for i, p in enumerate(cloud.points):
        if p2v[i] < 0:
            continue
        q = p + flow.displacements[i]
        idx = tuple(int(v) for v in np.floor((q - LO) / PITCH))
        if not all(0 <= idx[a] < GRID.dims[a] for a in range(3)):
            continue
        f = h_prev.features[p2v[i]].numpy()
        sums[idx] = sums.get(idx, 0) + f
        counts[idx] = counts.get(idx, 0) + 1
    keys = sorted(sums)
    return np.array(keys).reshape(-1, 3), np.array([sums[k] / counts[k] for k in keys])


def test_zero_flow_points_bit_exact():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(20, 3)), rng.random(20))
    out = warp_points(cloud, SceneFlow(np.zeros((20, 3))))
    np.testing.assert_array_equal(out.points, cloud.points)
    np.testing.assert_array_equal(out.intensity, cloud.intensity)


def test_warp_points_arithmetic():
    out = warp_points(PointCloud([[1.0, 2.0, 0.0]]), SceneFlow([[0.5, 0.0, 0.0]]))
    assert out.points.tolist() == [[1.5, 2.0, 0.0]]


def test_warp_points_matches_loop():
    rng = np.random.default_rng(1)
    pts, d = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    out = warp_points(PointCloud(pts), SceneFlow(d))
    for i in range(100):
        for a in range(3):
            assert out.points[i, a] == pts[i, a] + d[i, a]


def test_warp_points_length_mismatch():
    with pytest.raises(ValueError):
        warp_points(PointCloud(np.zeros((3, 3))), SceneFlow(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_zero_flow_features_identity(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(one_point_per_voxel(rng, 100))
    t, p2v = voxelize(cloud, GRID)
    h = with_random_features(t, rng)
    out = warp_features(h, cloud, SceneFlow(np.zeros((100, 3))), p2v)
    np.testing.assert_array_equal(out.coords, h.coords)
    assert torch.equal(out.features, h.features)


@pytest.mark.parametrize("seed", range(5))
def test_one_pitch_shift(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(one_point_per_voxel(rng, 150))
    t, p2v = voxelize(cloud, GRID)
    h = with_random_features(t, rng)
    flow = SceneFlow(np.tile([PITCH[0], 0.0, 0.0], (150, 1)))
    out = warp_features(h, cloud, flow, p2v)
    np.testing.assert_array_equal(out.coords, h.coords + [1, 0, 0])
    assert torch.equal(out.features, h.features)
    coords, feats = revoxelize_oracle(h, cloud, flow, p2v)
    np.testing.assert_array_equal(out.coords, coords)
    np.testing.assert_array_equal(out.features.numpy(), feats)


def test_collision_averages_sources():
    a = LO + (np.array([10, 10, 5]) + 0.5) * PITCH
    b = LO + (np.array([11, 10, 5]) + 0.5) * PITCH
    cloud = PointCloud([a, b])
    t, p2v = voxelize(cloud, GRID)
    h = t.with_features(torch.tensor([[1.0, 4.0], [3.0, -2.0]], dtype=torch.float64))
    flow = SceneFlow([[PITCH[0] * 2, 0, 0], [PITCH[0], 0, 0]])
    out = warp_features(h, cloud, flow, p2v)
    assert out.coords.tolist() == [[12, 10, 5]]
    assert out.features.tolist() == [[2.0, 1.0]]


@pytest.mark.parametrize("seed", range(5))
def test_random_flow_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-8.5, 8.5, size=(400, 3)) * [1, 1, 0.25]
    cloud = PointCloud(pts)
    t, p2v = voxelize(cloud, GRID)
    h = with_random_features(t, rng)
    flow = SceneFlow(rng.normal(scale=0.6, size=(400, 3)))
    out = warp_features(h, cloud, flow, p2v)
    coords, feats = revoxelize_oracle(h, cloud, flow, p2v)
    np.testing.assert_array_equal(out.coords, coords)
    np.testing.assert_allclose(out.features.numpy(), feats, rtol=1e-13, atol=1e-14)
    assert GRID.in_bounds(out.coords).all()


@pytest.mark.parametrize("seed", range(3))
def test_point_order_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-8, 8, size=(300, 3)) * [1, 1, 0.25]
    d = rng.normal(scale=0.5, size=(300, 3))
    t, p2v = voxelize(PointCloud(pts), GRID)
    h = with_random_features(t, rng)
    out = warp_features(h, PointCloud(pts), SceneFlow(d), p2v)
    perm = rng.permutation(300)
    out_p = warp_features(h, PointCloud(pts[perm]), SceneFlow(d[perm]), p2v[perm])
    np.testing.assert_array_equal(out.coords, out_p.coords)
    np.testing.assert_allclose(out.features.numpy(), out_p.features.numpy(), rtol=1e-13, atol=1e-14)


def test_warp_features_detached():
    rng = np.random.default_rng(0)
    cloud = PointCloud(one_point_per_voxel(rng, 10))
    t, p2v = voxelize(cloud, GRID)
    h = t.with_features(t.features.clone().requires_grad_(True))
    out = warp_features(h, cloud, SceneFlow(np.zeros((10, 3))), p2v)
    assert not out.features.requires_grad


def test_warp_features_length_checks():
    cloud = PointCloud(np.zeros((3, 3)))
    t, p2v = voxelize(cloud, GRID)
    with pytest.raises(ValueError):
        warp_features(t, cloud, SceneFlow(np.zeros((2, 3))), p2v)
    with pytest.raises(ValueError):
        warp_features(t, cloud, SceneFlow(np.zeros((3, 3))), p2v[:2])
