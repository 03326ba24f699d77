"""Finite-difference check of the analytic gradients through the full online pipeline.

The fixture is two compact double-precision scenes (32 points in total, so at
most 32 occupied voxels per view set). Each loss term, and their weighted sum, is evaluated
through the same code path as training; for every online parameter a seeded
sample of coordinates is compared against central differences.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .data import ScenePair
from .flow import SceneFlow
from .geom import PointCloud
from .loss import weighted_total
from .net import ParamSet, Tape, backward, init_params, target_from
from .rng import stream
from .train import TrainConfig, batch_losses
from .voxel import VoxelGridConfig, voxelize

FD_EPS = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-5
MIN_COVERAGE = 0.9
FIXTURE_POINTS = 32
FIXTURE_SCENES = 2
COORDS_PER_PARAM = 6
# holds every augmented view of the fixture; a small map keeps finite-difference
# roundoff low
FIXTURE_GRID = VoxelGridConfig((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0), (0.25, 0.25, 0.25))
TERMS = ("l_pnce", "l_ce", "l_flow", "total")


@dataclass(frozen=True)
class TermResult:
    term: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    kinks: int

    @property
    def ok(self) -> bool:
        coverage = self.checked / max(self.checked + self.kinks, 1)
        return self.max_rel_error < TOLERANCE and coverage >= MIN_COVERAGE


@dataclass(frozen=True)
class GradcheckReport:
    results: list[TermResult]
    voxels: int
    points: int

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def lines(self) -> list[str]:
        out = [f"fixture: {self.points} points, {self.voxels} voxels"]
        for r in self.results:
            status = "ok" if r.ok else "FAIL"
            out.append(
                f"{r.term:7s} max_rel_error={r.max_rel_error:.3e} over {r.checked} coords"
                f" ({r.kinks} straddling a kink)  {status}"
                f"  worst={r.worst_param}{list(r.worst_index)}"
                f" analytic={r.analytic:.6e} numeric={r.numeric:.6e}"
            )
        return out


def relative_error(a: float, n: float, scale: float = 1.0) -> float:
    """``|a - n| / max(|a|, |n|, REL_FLOOR * scale)``.

    ``scale`` is the largest gradient magnitude seen for the term (at least 1),
    so structurally zero gradients are judged against finite-difference noise of
    the term rather than an absolute constant.
    """
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR * max(scale, 1.0))


def fixture(seed: int) -> tuple[list[ScenePair], ParamSet, ParamSet, TrainConfig]:
    """Two compact scenes with double-precision parameters away from activation kinks.

    Two scenes give the classifier four views per step, so its batch statistics
    are not the degenerate two-sample case.
    """
    pairs = []
    per_scene = FIXTURE_POINTS // FIXTURE_SCENES
    for s in range(FIXTURE_SCENES):
        rng = stream(seed, "gradcheck", "scene", s)
        pts = rng.uniform([-1.0, -1.0, -0.5], [1.0, 1.0, 0.5], size=(per_scene, 3))
        disp = np.zeros_like(pts)
        disp[: per_scene // 2, 0] = 0.3
        prev = PointCloud(pts, rng.random(per_scene))
        pairs.append(ScenePair(prev, prev.with_points(pts + disp), SceneFlow(disp)))
    theta = init_params(stream(seed, "gradcheck", "init"), dtype=np.float64)
    # zero biases put dead voxels exactly on a ReLU kink, and a zero head blocks
    # classifier gradients; both are moved to a generic point
    rng = stream(seed, "gradcheck", "offsets")
    updates = {k: rng.normal(0.0, 0.1, size=theta[k].shape) for k in theta if k.endswith(".bias")}
    updates["classifier.fc3.weight"] = rng.normal(size=theta["classifier.fc3.weight"].shape)
    theta = theta.replace(updates)
    xi = target_from(init_params(stream(seed, "gradcheck", "target"), dtype=np.float64))
    cfg = TrainConfig(batch_size=FIXTURE_SCENES, n_matches=per_scene // 2, grid=FIXTURE_GRID, seed=seed)
    return pairs, theta, xi, cfg


def _term(cfg, pairs, theta, xi, term: str, tape: Tape | None):
    l_pnce, l_ce, l_flow = batch_losses(cfg, pairs, theta, xi, 0, tape)
    if term == "total":
        return weighted_total(l_pnce, l_ce, l_flow, cfg.loss)
    return {"l_pnce": l_pnce, "l_ce": l_ce, "l_flow": l_flow}[term]


def _value(loss) -> float:
    return float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)


class _SelectionRecorder(TorchFunctionMode):
    """Records the branch taken by each non-smooth op: ReLU signs and max-pool winners.

    If the record differs between ``theta - eps`` and ``theta + eps`` the
    interval straddles a kink and a central difference does not estimate the
    derivative at ``theta``.
    """

    def __init__(self):
        super().__init__()
        self.pattern: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        if func in (torch.relu, torch.Tensor.relu):
            self.pattern.append((args[0] > 0).detach().clone())
        elif func is torch.Tensor.scatter_reduce:
            _, dim, index, src = args[:4]
            self.pattern.append((src == out.gather(dim, index)).detach().clone())
        return out


def _evaluate(cfg, pairs, theta, xi, term) -> tuple[float, list[torch.Tensor]]:
    with _SelectionRecorder() as rec:
        value = _value(_term(cfg, pairs, theta, xi, term, None))
    return value, rec.pattern


def _same_pattern(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def check_term(
    term: str,
    pairs: list[ScenePair],
    theta: ParamSet,
    xi: ParamSet,
    cfg: TrainConfig,
    seed: int,
    corrupt: Callable[[ParamSet], ParamSet] | None = None,
) -> TermResult:
    tape = Tape(theta)
    grads = backward(tape, _term(cfg, pairs, theta, xi, term, tape))
    if corrupt is not None:
        grads = corrupt(grads)
    rng = stream(seed, "gradcheck", "coords", term)
    records, kinks = [], 0
    for name in theta:
        arr = theta[name]
        flat = rng.choice(arr.size, size=min(COORDS_PER_PARAM, arr.size), replace=False)
        for f in flat:
            idx = tuple(int(i) for i in np.unravel_index(f, arr.shape))
            evals = []
            for sign in (1.0, -1.0):
                w = arr.copy()
                w[idx] += sign * FD_EPS
                evals.append(_evaluate(cfg, pairs, theta.replace({name: w}), xi, term))
            if not _same_pattern(evals[0][1], evals[1][1]):
                kinks += 1
                continue
            numeric = (evals[0][0] - evals[1][0]) / (2 * FD_EPS)
            records.append((name, idx, float(grads[name][idx]), numeric))
    scale = max(abs(a) for _, _, a, _ in records)
    errs = [relative_error(a, n, scale) for _, _, a, n in records]
    w = int(np.argmax(errs))
    name, idx, a, n = records[w]
    return TermResult(term, errs[w], name, idx, a, n, len(records), kinks)


def run(seed: int = 0, corrupt: Callable[[ParamSet], ParamSet] | None = None) -> GradcheckReport:
    pairs, theta, xi, cfg = fixture(seed)
    voxels = sum(len(voxelize(p.curr, cfg.grid)[0]) for p in pairs)
    results = [check_term(t, pairs, theta, xi, cfg, seed, corrupt) for t in TERMS]
    return GradcheckReport(results, voxels, sum(len(p.curr) for p in pairs))


def scale_gradient(name: str, factor: float) -> Callable[[ParamSet], ParamSet]:
    """Corruption hook: multiply one parameter's analytic gradient by ``factor``."""

    def hook(grads: ParamSet) -> ParamSet:
        return grads.replace({name: grads[name] * factor})

    return hook
