"""Point clouds and the rigid augmentation group (flip, scale, yaw, translation)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points; row ``i`` is the identity of point ``i`` across views and frames.

    Args:
        points: (N, 3) coordinates in meters.
        intensity: optional (N,) reflectance in [0, 1].
    """

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"intensity has {inten.shape[0]} entries for {pts.shape[0]} points"
                )
            object.__setattr__(self, "intensity", _frozen(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, indices) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.points[idx], inten)

    def with_points(self, points: np.ndarray) -> PointCloud:
        """Same identities and intensities, new coordinates."""
        return PointCloud(points, self.intensity)


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]; values already in range are returned untouched."""
    if -math.pi < a <= math.pi:
        return float(a)
    r = math.remainder(a, 2 * math.pi)
    return math.pi if r <= -math.pi else r


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_FLIP = np.diag([1.0, -1.0, 1.0])


@dataclass(frozen=True)
class RigidTransform:
    """``x' = R(yaw) @ (scale * F(x)) + translation`` with ``F`` negating y iff ``flip``."""

    flip: bool = False
    scale: float = 1.0
    yaw: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3:
            raise ValueError("translation must have three components")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "flip", bool(self.flip))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if not all(math.isfinite(v) for v in (self.scale, self.yaw, *t)):
            raise ValueError("transform fields must be finite")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def linear(self) -> np.ndarray:
        """The 3x3 linear part ``R(yaw) @ scale @ F``."""
        m = yaw_matrix(self.yaw) * self.scale
        return m @ _FLIP if self.flip else m

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.flip:
            p = p * np.array([1.0, -1.0, 1.0])
        p = p * self.scale
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(p)
        out[..., 0] = c * p[..., 0] - s * p[..., 1] + self.translation[0]
        out[..., 1] = s * p[..., 0] + c * p[..., 1] + self.translation[1]
        out[..., 2] = p[..., 2] + self.translation[2]
        return out


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return cloud.with_points(t.apply(cloud.points))


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Single transform equal to applying ``first`` then ``second``."""
    # F R(a) = R(-a) F, so the second flip conjugates the first yaw.
    yaw = second.yaw + (-first.yaw if second.flip else first.yaw)
    translation = second.apply(np.asarray(first.translation))
    return RigidTransform(
        flip=first.flip != second.flip,
        scale=first.scale * second.scale,
        yaw=wrap_angle(yaw),
        translation=tuple(translation),
    )


def inverse(t: RigidTransform) -> RigidTransform:
    yaw = t.yaw if t.flip else -t.yaw
    inv_lin = RigidTransform(flip=t.flip, scale=1.0 / t.scale, yaw=yaw)
    translation = -inv_lin.apply(np.asarray(t.translation))
    return RigidTransform(t.flip, 1.0 / t.scale, yaw, tuple(translation))


@dataclass(frozen=True)
class AugmentConfig:
    yaw_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    translation_range: tuple[float, float] = (0.0, 0.2)
    scale_range: tuple[float, float] = (0.95, 1.05)
    flip_probability: float = 0.5
    n_rotation_classes: int = 10

    def __post_init__(self):
        for name in ("yaw_range", "translation_range", "scale_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must be a finite interval with lo <= hi")
            object.__setattr__(self, name, (lo, hi))
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if int(self.n_rotation_classes) < 1:
            raise ValueError("n_rotation_classes must be positive")

    def rotation_bin_centers(self) -> np.ndarray:
        lo, hi = self.yaw_range
        n = self.n_rotation_classes
        return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def sample_transform(
    cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[RigidTransform, int]:
    """Draw a random augmentation and its discrete rotation class."""
    flip = bool(rng.random() < cfg.flip_probability)
    scale = float(rng.uniform(*cfg.scale_range))
    translation = rng.uniform(*cfg.translation_range, size=3)
    c = int(rng.integers(cfg.n_rotation_classes))
    lo, hi = cfg.yaw_range
    yaw = lo + (c + 0.5) * (hi - lo) / cfg.n_rotation_classes
    return RigidTransform(flip, scale, yaw, tuple(translation)), c
