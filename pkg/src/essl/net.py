"""Desk-scale networks: sparse encoder, BEV projector, predictor and rotation classifier.

Parameters live in a :class:`ParamSet` of numpy arrays. A forward pass given a
:class:`Tape` pulls its parameters from the tape as autograd leaves so that
:func:`backward` can return gradients for every online parameter; without a
tape the same code runs as plain tensor arithmetic.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .voxel import BEVMap, SparseVoxelTensor

ROLES = ("encoder", "projector", "predictor", "classifier")
TARGET_ROLES = ("encoder", "projector")
STANDARDIZE_EPS = 1e-5

ENCODER_CHANNELS = (4, 16, 32)
PROJECTOR_CHANNELS = (32, 32, 16, 16)
PREDICTOR_CHANNELS = 16
CLASSIFIER_HIDDEN = 32

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13


class SchemaError(ValueError):
    """Two parameter sets (or a checkpoint and a parameter set) do not line up."""


class ParamSet:
    """Ordered name -> array mapping with a role tag per entry."""

    def __init__(self, arrays: dict[str, np.ndarray], roles: dict[str, str]):
        if arrays.keys() != roles.keys():
            raise SchemaError("arrays and roles must have the same names")
        for name, role in roles.items():
            if role not in ROLES:
                raise SchemaError(f"{name}: unknown role {role!r}")
        self._arrays = {k: np.asarray(v) for k, v in arrays.items()}
        self._roles = dict(roles)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def role(self, name: str) -> str:
        return self._roles[name]

    def names(self, roles: Iterable[str] | None = None) -> list[str]:
        if roles is None:
            return list(self._arrays)
        roles = set(roles)
        return [k for k in self._arrays if self._roles[k] in roles]

    def schema(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(k, self._roles[k], v.shape) for k, v in self._arrays.items()]

    def subset(self, roles: Iterable[str]) -> ParamSet:
        names = self.names(roles)
        return ParamSet({k: self._arrays[k] for k in names}, {k: self._roles[k] for k in names})

    def map(self, fn) -> ParamSet:
        return ParamSet({k: fn(v) for k, v in self._arrays.items()}, self._roles)

    def copy(self) -> ParamSet:
        return self.map(np.copy)

    def astype(self, dtype) -> ParamSet:
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> ParamSet:
        return self.map(np.zeros_like)

    def replace(self, updates: dict[str, np.ndarray]) -> ParamSet:
        arrays = dict(self._arrays)
        for k, v in updates.items():
            if k not in arrays:
                raise SchemaError(f"unknown parameter {k!r}")
            arrays[k] = v
        return ParamSet(arrays, self._roles)

    def check_same_schema(self, other: ParamSet) -> None:
        if list(self) != list(other):
            missing = set(self) ^ set(other)
            raise SchemaError(f"parameter names differ: {sorted(missing) or 'order'}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise SchemaError(f"{k}: shape {self[k].shape} vs {other[k].shape}")
            if self.role(k) != other.role(k):
                raise SchemaError(f"{k}: role {self.role(k)} vs {other.role(k)}")

    def allclose(self, other: ParamSet, **kw) -> bool:
        return list(self) == list(other) and all(np.allclose(self[k], other[k], **kw) for k in self)

    def array_equal(self, other: ParamSet) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(
    rng: np.random.Generator, n_classes: int = 10, dtype=np.float32
) -> ParamSet:
    """Fresh online parameters: glorot-uniform weights, zero biases, zero classifier output layer."""
    arrays: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}

    def add(name, role, shape, fan_in, fan_out, zero=False):
        w = _glorot(rng, shape, fan_in, fan_out, dtype)
        arrays[name + ".weight"] = np.zeros_like(w) if zero else w
        arrays[name + ".bias"] = np.zeros(shape[-1], dtype=dtype)
        roles[name + ".weight"] = roles[name + ".bias"] = role

    k = len(OFFSETS)
    for i, (cin, cout) in enumerate(zip(ENCODER_CHANNELS, ENCODER_CHANNELS[1:]), 1):
        add(f"encoder.conv{i}", "encoder", (k, cin, cout), k * cin, k * cout)
    for i, (cin, cout) in enumerate(zip(PROJECTOR_CHANNELS, PROJECTOR_CHANNELS[1:]), 1):
        add(f"projector.fc{i}", "projector", (cin, cout), cin, cout)
    add("predictor.fc", "predictor", (PREDICTOR_CHANNELS,) * 2, PREDICTOR_CHANNELS, PREDICTOR_CHANNELS)
    dims = (PROJECTOR_CHANNELS[-1], CLASSIFIER_HIDDEN, CLASSIFIER_HIDDEN, n_classes)
    for i, (cin, cout) in enumerate(zip(dims, dims[1:]), 1):
        # zero output head: the untrained classifier is exactly uniform
        add(f"classifier.fc{i}", "classifier", (cin, cout), cin, cout, zero=i == len(dims) - 1)
    return ParamSet(arrays, roles)


def target_from(online: ParamSet) -> ParamSet:
    """Target network parameters: a copy of the online encoder and projector."""
    return online.subset(TARGET_ROLES).copy()


class TapeError(RuntimeError):
    pass


class Tape:
    """Records a forward pass over ``params`` for one call to :func:`backward`.

    Parameters read through the tape become autograd leaves; anything the loss
    does not touch receives a zero gradient.
    """

    def __init__(self, params: ParamSet):
        self.params = params
        self._leaves: dict[str, torch.Tensor] = {}
        self.consumed = False

    def leaf(self, name: str) -> torch.Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if name not in self._leaves:
            if name not in self.params:
                raise TapeError(f"parameter {name!r} is not recorded by this tape")
            self._leaves[name] = torch.tensor(self.params[name], requires_grad=True)
        return self._leaves[name]

    @property
    def recorded(self) -> list[str]:
        return list(self._leaves)


def _param(p: ParamSet, name: str, tape: Tape | None) -> torch.Tensor:
    if tape is not None:
        return tape.leaf(name)
    return torch.from_numpy(p[name])


def backward(tape: Tape, loss: torch.Tensor | float) -> ParamSet:
    """Gradient of a scalar loss with respect to every parameter on the tape."""
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    if isinstance(loss, torch.Tensor) and loss.numel() != 1:
        raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    tape.consumed = True
    grads = {k: np.zeros_like(v) for k, v in tape.params.items()}
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return ParamSet(grads, {k: tape.params.role(k) for k in tape.params})
    names = tape.recorded
    leaves = [tape._leaves[k] for k in names]
    for k, g in zip(names, torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)):
        if g is not None:
            grads[k] = g.numpy().astype(tape.params[k].dtype, copy=True)
    return ParamSet(grads, {k: tape.params.role(k) for k in tape.params})


def _check_channels(got: int, want: int, what: str) -> None:
    if got != want:
        raise ValueError(f"{what}: expected {want} input channels, got {got}")


def neighbor_pairs(t: SparseVoxelTensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """(output row, input row) pairs for each of the 27 neighborhood offsets."""
    keys = t.grid.linear_index(t.coords)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    pairs = []
    for off in OFFSETS:
        nb = t.coords + off
        valid = np.flatnonzero(t.grid.in_bounds(nb))
        nk = t.grid.linear_index(nb[valid])
        pos = np.searchsorted(sorted_keys, nk)
        pos_c = np.minimum(pos, max(len(sorted_keys) - 1, 0))
        hit = sorted_keys[pos_c] == nk if len(sorted_keys) else np.zeros(0, dtype=bool)
        pairs.append((torch.from_numpy(valid[hit]), torch.from_numpy(order[pos_c[hit]])))
    return pairs


def _subm_conv(x, weight, bias, pairs):
    out = x.new_zeros((x.shape[0], weight.shape[2]))
    for k, (out_rows, in_rows) in enumerate(pairs):
        if out_rows.numel():
            out = out.index_add(0, out_rows, x[in_rows] @ weight[k])
    return out + bias


def encoder_forward(
    p: ParamSet, t: SparseVoxelTensor, tape: Tape | None = None
) -> SparseVoxelTensor:
    """Two submanifold 3x3x3 blocks with ReLU, 4 -> 16 -> 32 channels; coords unchanged."""
    _check_channels(t.channels, ENCODER_CHANNELS[0], "encoder")
    w1 = _param(p, "encoder.conv1.weight", tape)
    x = t.features.to(w1.dtype)
    if len(t) == 0:
        return t.with_features(x.new_zeros((0, ENCODER_CHANNELS[-1])))
    pairs = neighbor_pairs(t)
    for i in range(1, len(ENCODER_CHANNELS)):
        w = _param(p, f"encoder.conv{i}.weight", tape)
        b = _param(p, f"encoder.conv{i}.bias", tape)
        x = torch.relu(_subm_conv(x, w, b, pairs))
    return t.with_features(x)


def standardize(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    mean = x.mean(dim=dim, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=dim, keepdim=True)
    return (x - mean) / torch.sqrt(var + STANDARDIZE_EPS)


def _linear(p, name, x, tape):
    return x @ _param(p, name + ".weight", tape) + _param(p, name + ".bias", tape)


def project(p: ParamSet, bev: BEVMap, tape: Tape | None = None) -> BEVMap:
    """Three per-cell linear layers 32 -> 32 -> 16 -> 16.

    The first two are followed by per-channel standardization over the H*W cells
    of the map and ReLU.
    """
    h, w, c = bev.shape
    _check_channels(c, PROJECTOR_CHANNELS[0], "projector")
    x = bev.data.reshape(h * w, c)
    x = x.to(_param(p, "projector.fc1.weight", tape).dtype)
    x = torch.relu(standardize(_linear(p, "projector.fc1", x, tape)))
    x = torch.relu(standardize(_linear(p, "projector.fc2", x, tape)))
    x = _linear(p, "projector.fc3", x, tape)
    return BEVMap(x.reshape(h, w, -1))


def predict(p: ParamSet, bev: BEVMap, tape: Tape | None = None) -> BEVMap:
    h, w, c = bev.shape
    _check_channels(c, PREDICTOR_CHANNELS, "predictor")
    x = _linear(p, "predictor.fc", bev.data.reshape(h * w, c), tape)
    return BEVMap(x.reshape(h, w, -1))


def global_average(bev: BEVMap) -> torch.Tensor:
    return bev.data.mean(dim=(0, 1))


def classify(
    p: ParamSet, bev: BEVMap | list[BEVMap], tape: Tape | None = None
) -> torch.Tensor:
    """Rotation-class logits.

    A single map gives an (n,) vector; a list gives (B, n). Hidden layers are
    standardized per feature across the batch when B > 1 and passed through
    unchanged for a single map.
    """
    single = isinstance(bev, BEVMap)
    maps = [bev] if single else list(bev)
    for m in maps:
        _check_channels(m.shape[2], PROJECTOR_CHANNELS[-1], "classifier")
    x = torch.stack([global_average(m) for m in maps])
    norm = standardize if x.shape[0] > 1 else (lambda v: v)
    x = torch.relu(norm(_linear(p, "classifier.fc1", x, tape)))
    x = torch.relu(norm(_linear(p, "classifier.fc2", x, tape)))
    logits = _linear(p, "classifier.fc3", x, tape)
    return logits[0] if single else logits


def gather_point_features(
    h: SparseVoxelTensor,
    proj: BEVMap,
    cloud,
    indices,
    point_to_voxel: np.ndarray,
) -> torch.Tensor:
    """Unit-norm (len(indices), 48) features: voxel feature ++ projected BEV cell feature."""
    p2v = np.asarray(point_to_voxel)
    if p2v.shape[0] != len(cloud):
        raise ValueError("point_to_voxel does not match the cloud")
    vox = p2v[np.asarray(indices, dtype=np.int64)]
    if (vox < 0).any():
        bad = np.asarray(indices)[vox < 0][0]
        raise ValueError(f"point {int(bad)} was dropped by voxelization")
    cells = h.coords[vox]
    vox_t = torch.from_numpy(vox)
    feats = torch.cat(
        [h.features[vox_t], proj.data[torch.from_numpy(cells[:, 1]), torch.from_numpy(cells[:, 0])].to(h.features.dtype)],
        dim=1,
    )
    return F.normalize(feats, dim=1)


def gamma_schedule(k: int, K: int, gamma_base: float) -> float:
    """Target decay rate rising from ``gamma_base`` at k=0 to 1 at k=K along a cosine."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if not 0 <= k <= K:
        raise ValueError(f"step {k} outside [0, {K}]")
    if k == 0:
        return float(gamma_base)
    if k == K:
        return 1.0
    return 1.0 - (1.0 - gamma_base) * (math.cos(math.pi * k / K) + 1.0) / 2.0


def ema_update(target: ParamSet, online: ParamSet, gamma: float) -> ParamSet:
    """``xi <- gamma * xi + (1 - gamma) * theta`` over the target's entries."""
    if set(target.names()) - set(target.names(TARGET_ROLES)):
        raise SchemaError("target may only hold encoder and projector parameters")
    updated = {}
    for k in target:
        if k not in online:
            raise SchemaError(f"online parameters lack {k!r}")
        if online[k].shape != target[k].shape or online.role(k) != target.role(k):
            raise SchemaError(f"{k}: online {online[k].shape} vs target {target[k].shape}")
        xi, theta = target[k], online[k]
        updated[k] = (gamma * xi + (1.0 - gamma) * theta).astype(xi.dtype)
    return target.replace(updated)
