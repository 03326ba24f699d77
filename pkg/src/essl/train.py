"""Joint spatial/temporal pre-training: one step, optimizer, schedules, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng as rngmod
from .data import ScenePair
from .flow import warp_features
from .geom import AugmentConfig, apply_transform, sample_transform
from .loss import LossWeights, MatchSet, combine, flow_l2, point_info_nce, rotation_ce, weighted_total
from .net import (
    ROLES,
    ParamSet,
    SchemaError,
    Tape,
    backward,
    classify,
    ema_update,
    encoder_forward,
    gamma_schedule,
    gather_point_features,
    predict,
    project,
    target_from,
)
from .voxel import BEVMap, NonFiniteFeatures, VoxelGridConfig, bev_maxpool, voxelize

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "gamma", "l_pnce", "l_ce", "l_flow", "total")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 300
    batch_size: int = 2
    max_lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma_base: float = 0.999
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    grid: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    seed: int = 0
    spatial: bool = True
    temporal: bool = True
    n_matches: int = 2048
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if not 0 <= self.gamma_base < 1:
            raise ValueError("gamma_base must lie in [0, 1)")
        if self.n_matches < 2:
            raise ValueError("n_matches must be at least 2")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    lr: float
    gamma: float
    l_pnce: float
    l_ce: float
    l_flow: float
    total: float

    def row(self) -> list[str]:
        return [str(self.step)] + [f"{getattr(self, k):.17g}" for k in METRIC_FIELDS[1:]]


WARMUP_FRACTION = 0.1
WARMUP_START_DIVISOR = 25
LR_FLOOR_DIVISOR = 100


def lr_schedule(k: float, K: int, max_lr: float) -> float:
    """Linear warmup from max_lr/25 over the first 10% of steps, cosine decay to max_lr/100."""
    if not 0 <= k <= K:
        raise ValueError(f"step {k} outside [0, {K}]")
    warm = WARMUP_FRACTION * K
    if k == warm:
        return max_lr
    if k < warm:
        start = max_lr / WARMUP_START_DIVISOR
        return start + (max_lr - start) * k / warm
    if k == K:
        return max_lr / LR_FLOOR_DIVISOR
    floor = max_lr / LR_FLOOR_DIVISOR
    progress = (k - warm) / (K - warm)
    return floor + (max_lr - floor) * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class AdamState:
    step: int
    m: ParamSet
    v: ParamSet

    @classmethod
    def zeros(cls, params: ParamSet) -> AdamState:
        return cls(0, params.zeros_like(), params.zeros_like())


def adamw_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One AdamW update with bias correction and decoupled weight decay."""
    params.check_same_schema(grads)
    params.check_same_schema(state.m)
    t = state.step + 1
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        p, g = params[k], grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[k] = (p - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return params.replace(new_p), AdamState(t, state.m.replace(new_m), state.v.replace(new_v))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, terms, detail: str = ""):
        msg = f"non-finite loss at step {step}: l_pnce, l_ce, l_flow = {terms}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.step = step
        self.terms = terms


class DegenerateScene(ValueError):
    """Too few points survive voxelization in both augmented views."""


def spatial_views(
    cfg: TrainConfig, cloud, theta: ParamSet, tape: Tape | None, rng: np.random.Generator
) -> tuple[torch.Tensor, list[BEVMap], list[int]]:
    """Two augmented views: their PointInfoNCE loss, projected BEV maps and rotation classes."""
    views = []
    for _ in range(2):
        t, c = sample_transform(cfg.augment, rng)
        view = apply_transform(cloud, t)
        vox, p2v = voxelize(view, cfg.grid)
        views.append((view, vox, p2v, c))
    survivors = np.flatnonzero((views[0][2] >= 0) & (views[1][2] >= 0))
    if survivors.size < 2:
        raise DegenerateScene(f"only {survivors.size} points survive in both views")
    ids = rng.choice(survivors, size=min(cfg.n_matches, survivors.size), replace=False)

    feats, maps = [], []
    for view, vox, p2v, _ in views:
        h = encoder_forward(theta, vox, tape)
        z = project(theta, bev_maxpool(h), tape)
        feats.append(gather_point_features(h, z, view, ids, p2v))
        maps.append(z)
    l_pnce = point_info_nce(feats[0], feats[1], MatchSet.identity(len(ids)), cfg.loss.tau)
    return l_pnce, maps, [v[3] for v in views]


def temporal_loss(
    cfg: TrainConfig, pair: ScenePair, theta: ParamSet, xi: ParamSet, tape: Tape | None
) -> torch.Tensor:
    """Flow-equivariance loss between the online prediction for p_t and the warped target of p_{t-1}."""
    vox_t, _ = voxelize(pair.curr, cfg.grid)
    z_t = project(theta, bev_maxpool(encoder_forward(theta, vox_t, tape)), tape)
    y_t = predict(theta, z_t, tape)
    with torch.no_grad():
        vox_prev, p2v_prev = voxelize(pair.prev, cfg.grid)
        h_prev = encoder_forward(xi, vox_prev)
        warped = warp_features(h_prev, pair.prev, pair.flow, p2v_prev)
        z_prev = project(xi, bev_maxpool(warped))
    return flow_l2(z_prev, y_t)


def batch_losses(
    cfg: TrainConfig,
    pairs: list[ScenePair],
    theta: ParamSet,
    xi: ParamSet,
    k: int,
    tape: Tape | None = None,
) -> tuple[torch.Tensor | float, torch.Tensor | float, torch.Tensor | float]:
    """Batch-mean (l_pnce, l_ce, l_flow); disabled or fully degenerate terms are 0."""
    pnce, maps, labels, fl = [], [], [], []
    for b, pair in enumerate(pairs):
        if cfg.spatial:
            rng = rngmod.stream(cfg.seed, "step", k, "item", b)
            try:
                lp, zs, cs = spatial_views(cfg, pair.curr, theta, tape, rng)
                pnce.append(lp)
                maps += zs
                labels += cs
            except DegenerateScene as e:
                log.warning("step %d item %d: skipping spatial branch: %s", k, b, e)
        if cfg.temporal:
            fl.append(temporal_loss(cfg, pair, theta, xi, tape))
    ce = []
    if maps:
        logits = classify(theta, maps, tape)
        ce = [rotation_ce(row, c) for row, c in zip(logits, labels)]

    def mean(xs):
        return torch.stack(xs).mean() if xs else 0.0

    return mean(pnce), mean(ce), mean(fl)


def train_step(
    cfg: TrainConfig,
    pairs: ScenePair | list[ScenePair],
    theta: ParamSet,
    xi: ParamSet,
    opt_state: AdamState,
    k: int,
) -> tuple[ParamSet, ParamSet, AdamState, StepMetrics]:
    if isinstance(pairs, ScenePair):
        pairs = [pairs]
    tape = Tape(theta)
    try:
        l_pnce, l_ce, l_flow = batch_losses(cfg, pairs, theta, xi, k, tape)
    except NonFiniteFeatures as e:
        raise NonFiniteLoss(k, [math.nan] * 3, str(e)) from e
    terms = [float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for v in (l_pnce, l_ce, l_flow)]
    if not all(math.isfinite(v) for v in terms):
        raise NonFiniteLoss(k, terms)
    total = weighted_total(l_pnce, l_ce, l_flow, cfg.loss)
    grads = backward(tape, total)

    lr = lr_schedule(k, cfg.total_steps, cfg.max_lr)
    gamma = gamma_schedule(k, cfg.total_steps, cfg.gamma_base)
    theta, opt_state = adamw_step(
        theta, grads, opt_state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps
    )
    xi = ema_update(xi, theta, gamma)
    report = combine(*terms, cfg.loss)
    metrics = StepMetrics(k, lr, gamma, report.l_pnce, report.l_ce, report.l_flow, report.total)
    return theta, xi, opt_state, metrics


def batch_indices(n_items: int, batch_size: int, k: int, seed: int) -> list[int]:
    """Items for step ``k``: consecutive slices of a fresh permutation per epoch."""
    if n_items == 0:
        raise ValueError("empty dataset")
    out = []
    for q in range(k * batch_size, (k + 1) * batch_size):
        epoch, pos = divmod(q, n_items)
        out.append(int(rngmod.stream(seed, "epoch", epoch).permutation(n_items)[pos]))
    return out


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"ESSL"
CHECKPOINT_VERSION = 1
_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}
_META_ROLE = 255
_PREFIX_TARGET = "target:"
_PREFIX_M = "adam.m:"
_PREFIX_V = "adam.v:"
_STEP = "meta:step"
_ADAM_STEP = "meta:adam_step"


class CheckpointError(ValueError):
    """The checkpoint file is truncated or otherwise unreadable."""


@dataclass
class Checkpoint:
    theta: ParamSet
    xi: ParamSet
    opt_state: AdamState
    step: int


def _entries(ckpt: Checkpoint):
    for k, v in ckpt.theta.items():
        yield k, _ROLE_CODE[ckpt.theta.role(k)], v
    for k, v in ckpt.xi.items():
        yield _PREFIX_TARGET + k, _ROLE_CODE[ckpt.xi.role(k)], v
    for k, v in ckpt.opt_state.m.items():
        yield _PREFIX_M + k, _ROLE_CODE[ckpt.opt_state.m.role(k)], v
    for k, v in ckpt.opt_state.v.items():
        yield _PREFIX_V + k, _ROLE_CODE[ckpt.opt_state.v.role(k)], v
    yield _STEP, _META_ROLE, np.array(ckpt.step)
    yield _ADAM_STEP, _META_ROLE, np.array(ckpt.opt_state.step)


def save_checkpoint(theta, xi, opt_state, k, path) -> None:
    """Write all arrays as float32 little-endian records after an ``ESSL`` header."""
    if not 0 <= k < 1 << 24 or not 0 <= opt_state.step < 1 << 24:
        raise ValueError("step counters must fit exactly in float32")
    entries = list(_entries(Checkpoint(theta, xi, opt_state, k)))
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name, role, arr in entries:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", role, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_entries(data: bytes):
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not an ESSL checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("corrupt entry name") from e
        role, rank = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if role != _META_ROLE and role >= len(ROLES):
            raise CheckpointError(f"{name}: invalid role code {role}")
        out[name] = (role, arr)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last entry")
    return out


def load_checkpoint(path, expected: ParamSet | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected``, verify its online schema matches by name."""
    entries = _read_entries(Path(path).read_bytes())

    def collect(prefix):
        arrays, roles = {}, {}
        for name, (role, arr) in entries.items():
            if role == _META_ROLE:
                continue
            if prefix and name.startswith(prefix):
                key = name[len(prefix) :]
            elif not prefix and ":" not in name:
                key = name
            else:
                continue
            arrays[key], roles[key] = arr, ROLES[role]
        return ParamSet(arrays, roles)

    try:
        theta = collect("")
        step = int(entries[_STEP][1])
        adam_step = int(entries[_ADAM_STEP][1])
    except KeyError as e:
        raise CheckpointError(f"missing entry {e}") from e
    if expected is not None:
        for name, role, shape in expected.schema():
            if name not in theta:
                raise SchemaError(f"checkpoint lacks parameter {name!r}")
            if theta[name].shape != shape or theta.role(name) != role:
                raise SchemaError(
                    f"parameter {name!r}: checkpoint {theta.role(name)} {theta[name].shape}, expected {role} {shape}"
                )
        extra = set(theta) - set(expected)
        if extra:
            raise SchemaError(f"unexpected parameter {sorted(extra)[0]!r} in checkpoint")
    xi = collect(_PREFIX_TARGET)
    m, v = collect(_PREFIX_M), collect(_PREFIX_V)
    theta.check_same_schema(m)
    theta.check_same_schema(v)
    return Checkpoint(theta, xi, AdamState(adam_step, m, v), step)


# --- metrics -----------------------------------------------------------------


class MetricsWriter:
    """Append-only ``metrics.csv`` with full float precision."""

    def __init__(self, path):
        self.path = Path(path)
        with self.path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(METRIC_FIELDS)

    def append(self, m: StepMetrics) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(m.row())


def read_metrics(path) -> list[dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def pretrain(
    cfg: TrainConfig,
    dataset,
    out_dir,
    theta: ParamSet,
    on_step=None,
) -> tuple[ParamSet, ParamSet, AdamState, list[StepMetrics]]:
    """Run ``cfg.total_steps`` steps over ``dataset``, writing metrics and checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xi = target_from(theta)
    state = AdamState.zeros(theta)
    writer = MetricsWriter(out / "metrics.csv")
    history = []
    for k in range(cfg.total_steps):
        batch = [dataset[i] for i in batch_indices(len(dataset), cfg.batch_size, k, cfg.seed)]
        theta, xi, state, metrics = train_step(cfg, batch, theta, xi, state, k)
        writer.append(metrics)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
        done = k + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
            save_checkpoint(theta, xi, state, done, out / f"ckpt_{done:06d}.essl")
    return theta, xi, state, history

