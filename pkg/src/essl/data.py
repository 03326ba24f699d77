"""Scene pairs: synthetic generation with exact flow, and on-disk KITTI-style datasets.

Dataset directory layout::

    manifest.json
    <sequence>/<id>.prev.bin   x, y, z, intensity  float32 LE
    <sequence>/<id>.curr.bin
    <sequence>/<id>.flow.bin   dx, dy, dz          float32 LE, aligned to prev

``manifest.json`` lists sequences and their pairs with paths relative to the
manifest.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import SceneFlow
from .geom import PointCloud

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "essl-dataset"
KITTI_FFOV_BOX = ((0.0, -40.0, -3.0), (70.4, 40.0, 1.0))


class FormatError(ValueError):
    """A data file or manifest does not match its declared layout."""


@dataclass(frozen=True, eq=False)
class ScenePair:
    prev: PointCloud
    curr: PointCloud
    flow: SceneFlow
    provenance: str = "synthetic"
    object_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.flow) != len(self.prev):
            raise ValueError(f"flow has {len(self.flow)} vectors for {len(self.prev)} points")
        if self.provenance not in ("synthetic", "file"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class SynthConfig:
    """Box-world scenes on a ground plane.

    Boxes are car-like and aligned with the x (driving) axis; they move along it.
    Sizes are meters, speeds meters per frame.
    """

    n_objects: int = 6
    object_length_range: tuple[float, float] = (3.5, 4.5)
    object_width_range: tuple[float, float] = (1.6, 2.0)
    object_height_range: tuple[float, float] = (1.4, 1.8)
    object_speed_range: tuple[float, float] = (0.0, 0.6)
    bidirectional: bool = True
    ego_speed_range: tuple[float, float] = (0.0, 0.3)
    ground_extent: float = 7.5
    ground_z: float = -1.5
    points_per_object: int = 250
    points_ground: int = 800
    n_walls: int = 2
    wall_offset_range: tuple[float, float] = (4.5, 7.0)
    wall_height: float = 3.0
    points_per_wall: int = 1200
    density_radius: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in (
            "object_length_range",
            "object_width_range",
            "object_height_range",
            "object_speed_range",
            "ego_speed_range",
            "wall_offset_range",
        ):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (0 <= lo <= hi and math.isfinite(hi)):
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
            object.__setattr__(self, name, (lo, hi))
        for name in ("n_objects", "points_per_object", "points_ground", "n_walls", "points_per_wall"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ground_extent <= 0 or self.density_radius <= 0:
            raise ValueError("ground_extent and density_radius must be positive")


def _range_keep(rng, xy: np.ndarray, r0: float) -> np.ndarray:
    """Thin points so that areal density falls off as 1/range^2 beyond ``r0``."""
    r = np.hypot(xy[:, 0], xy[:, 1])
    p = np.minimum(1.0, (r0 / np.maximum(r, 1e-9)) ** 2)
    return rng.random(len(xy)) < p


def _box_surface(rng, n: int, length: float, width: float, height: float) -> np.ndarray:
    """``n`` points on the four sides and top of a box centred at the origin, base at z=0."""
    faces = np.array([length * height, length * height, width * height, width * height, length * width])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    hl, hw = length / 2, width / 2
    side_y = face < 2
    pts[side_y, 0] = (u[side_y] - 0.5) * length
    pts[side_y, 1] = np.where(face[side_y] == 0, -hw, hw)
    pts[side_y, 2] = v[side_y] * height
    side_x = (face == 2) | (face == 3)
    pts[side_x, 0] = np.where(face[side_x] == 2, -hl, hl)
    pts[side_x, 1] = (u[side_x] - 0.5) * width
    pts[side_x, 2] = v[side_x] * height
    top = face == 4
    pts[top, 0] = (u[top] - 0.5) * length
    pts[top, 1] = (v[top] - 0.5) * width
    pts[top, 2] = height
    return pts


def gen_pair(cfg: SynthConfig, rng: np.random.Generator) -> ScenePair:
    """One (previous, current) frame pair with exact per-point flow.

    Every point keeps its index across frames; the current frame is the previous
    one advanced by each object's velocity minus the ego motion.
    """
    ext = cfg.ground_extent
    ego = np.zeros(3)
    ego[0] = rng.uniform(*cfg.ego_speed_range)

    n_cand = 4 * cfg.points_ground
    cand = rng.uniform(-ext, ext, size=(n_cand, 2))
    keep = np.flatnonzero(_range_keep(rng, cand, cfg.density_radius))[: cfg.points_ground]
    ground = np.column_stack([cand[keep], np.full(len(keep), cfg.ground_z)])
    ground[:, 2] += rng.normal(0.0, 0.02, size=len(keep))

    parts = [ground]
    vel = [np.zeros((len(ground), 3))]
    ids = [np.full(len(ground), -1)]
    inten = [rng.uniform(0.0, 0.3, size=len(ground))]
    for k in range(cfg.n_walls):
        # facades run along the street (x axis), alternating sides
        side = 1.0 if k % 2 == 0 else -1.0
        y = side * rng.uniform(*cfg.wall_offset_range)
        n = cfg.points_per_wall
        pts = np.column_stack([
            rng.uniform(-ext, ext, n),
            np.full(n, y) + rng.normal(0.0, 0.02, n),
            cfg.ground_z + rng.uniform(0.0, cfg.wall_height, n),
        ])
        parts.append(pts)
        vel.append(np.zeros((n, 3)))
        ids.append(np.full(n, -2))
        inten.append(rng.uniform(0.2, 0.6, n))
    for k in range(cfg.n_objects):
        length = rng.uniform(*cfg.object_length_range)
        width = rng.uniform(*cfg.object_width_range)
        height = rng.uniform(*cfg.object_height_range)
        center = np.array([*rng.uniform(-ext + 1.0, ext - 1.0, size=2), cfg.ground_z])
        speed = rng.uniform(*cfg.object_speed_range)
        direction = rng.choice((-1.0, 1.0)) if cfg.bidirectional else 1.0
        r = max(np.hypot(center[0], center[1]), 1e-9)
        n = max(8, int(round(cfg.points_per_object * min(1.0, (cfg.density_radius * 2 / r) ** 2))))
        pts = _box_surface(rng, n, length, width, height) + center
        parts.append(pts)
        vel.append(np.tile([direction * speed, 0.0, 0.0], (n, 1)))
        ids.append(np.full(n, k))
        inten.append(np.clip(rng.uniform(0.3, 1.0) + rng.normal(0, 0.05, n), 0.0, 1.0))

    prev_pts = np.concatenate(parts)
    if len(prev_pts) == 0:
        raise ValueError("synthetic scene has no points")
    disp = np.concatenate(vel) - ego
    intensity = np.concatenate(inten)
    prev = PointCloud(prev_pts, intensity)
    curr = PointCloud(prev_pts + disp, intensity)
    return ScenePair(prev, curr, SceneFlow(disp), "synthetic", np.concatenate(ids))


def _file_size(path) -> int:
    try:
        return os.path.getsize(path)
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e


def load_point_bin(path) -> PointCloud:
    size = _file_size(path)
    if size % 16:
        raise FormatError(f"{path}: size {size} is not a multiple of 16 bytes")
    rec = np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def save_point_bin(path, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    rec.tofile(path)


def load_flow_bin(path, expected_count: int) -> SceneFlow:
    size = _file_size(path)
    if size != expected_count * 12:
        raise FormatError(f"{path}: {size} bytes, expected {expected_count * 12} for {expected_count} vectors")
    return SceneFlow(np.fromfile(path, dtype="<f4").reshape(-1, 3).astype(np.float64))


def save_flow_bin(path, flow: SceneFlow) -> None:
    flow.displacements.astype("<f4").tofile(path)


def ffov_crop(cloud: PointCloud, box=KITTI_FFOV_BOX) -> tuple[PointCloud, np.ndarray]:
    """Keep points inside ``[min, max)`` per axis; also return their original indices."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    inside = np.all((cloud.points >= lo) & (cloud.points < hi), axis=1)
    kept = np.flatnonzero(inside)
    return cloud.subset(kept), kept


def crop_pair(pair: ScenePair, box=KITTI_FFOV_BOX) -> ScenePair:
    """FFOV-crop the previous frame and carry flow and current points along by index."""
    prev, kept = ffov_crop(pair.prev, box)
    ids = None if pair.object_ids is None else pair.object_ids[kept]
    return ScenePair(prev, pair.curr.subset(kept), pair.flow.subset(kept), pair.provenance, ids)


@dataclass(frozen=True)
class PairEntry:
    prev: str
    curr: str
    flow: str


def write_manifest(root, sequences: dict[str, list[PairEntry]]) -> Path:
    path = Path(root) / MANIFEST_NAME
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "sequences": [
            {"name": name, "pairs": [{"prev": e.prev, "curr": e.curr, "flow": e.flow} for e in entries]}
            for name, entries in sequences.items()
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root) -> list[PairEntry]:
    path = Path(root) / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not an {MANIFEST_FORMAT} manifest")
    entries = []
    for seq in doc.get("sequences", []):
        for item in seq.get("pairs", []):
            try:
                entries.append(PairEntry(item["prev"], item["curr"], item["flow"]))
            except (KeyError, TypeError) as e:
                raise FormatError(f"{path}: malformed pair entry {item!r}") from e
    return entries


def load_pair(root, entry: PairEntry) -> ScenePair:
    root = Path(root)
    prev = load_point_bin(root / entry.prev)
    curr = load_point_bin(root / entry.curr)
    if len(curr) != len(prev):
        raise FormatError(f"{entry.curr}: {len(curr)} points, previous frame has {len(prev)}")
    flow = load_flow_bin(root / entry.flow, len(prev))
    return ScenePair(prev, curr, flow, "file")


class Dataset:
    """Pairs listed in a manifest, in manifest order, loaded lazily and cached."""

    def __init__(self, root):
        self.root = Path(root)
        self.entries = read_manifest(self.root)
        self._cache: dict[int, ScenePair] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ScenePair:
        if i not in self._cache:
            self._cache[i] = load_pair(self.root, self.entries[i])
        return self._cache[i]
