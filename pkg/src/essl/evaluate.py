"""Probes of a trained model: rotation prediction, flow consistency, view agreement."""

from __future__ import annotations

import numpy as np
import torch

from . import rng as rngmod
from .geom import apply_transform, sample_transform
from .net import ParamSet, classify, encoder_forward, gather_point_features, project
from .train import DegenerateScene, TrainConfig, temporal_loss
from .voxel import bev_maxpool, voxelize

VIEWS_PER_PAIR = 10
COSINE_POINTS = 512


def _encode_view(theta, cloud, cfg):
    vox, p2v = voxelize(cloud, cfg.grid)
    h = encoder_forward(theta, vox)
    return h, project(theta, bev_maxpool(h)), p2v


@torch.no_grad()
def rotation_predictions(
    theta: ParamSet,
    pairs,
    cfg: TrainConfig,
    seed: int,
    views_per_pair: int = VIEWS_PER_PAIR,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted and true rotation classes for randomly augmented current frames.

    All views are classified as one batch, so the classifier standardizes its
    hidden features with statistics over the whole evaluation set.
    """
    maps, labels = [], []
    for i, pair in enumerate(pairs):
        rng = rngmod.stream(seed, "eval-rotation", i)
        for _ in range(views_per_pair):
            t, c = sample_transform(cfg.augment, rng)
            maps.append(_encode_view(theta, apply_transform(pair.curr, t), cfg)[1])
            labels.append(c)
    if not maps:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    preds = torch.argmax(classify(theta, maps), dim=1).numpy()
    return preds.astype(np.int64), np.array(labels, dtype=np.int64)


@torch.no_grad()
def positive_cosine(theta: ParamSet, cloud, cfg: TrainConfig, rng) -> float:
    """Mean cosine between the gathered features of the same points in two views."""
    views = []
    for _ in range(2):
        t, _ = sample_transform(cfg.augment, rng)
        view = apply_transform(cloud, t)
        views.append((view, *_encode_view(theta, view, cfg)))
    survivors = np.flatnonzero((views[0][3] >= 0) & (views[1][3] >= 0))
    if survivors.size < 2:
        raise DegenerateScene(f"only {survivors.size} points survive in both views")
    ids = rng.choice(survivors, size=min(COSINE_POINTS, survivors.size), replace=False)
    fa, fb = (gather_point_features(h, z, v, ids, p2v) for v, h, z, p2v in views)
    return float((fa * fb).sum(dim=1).mean())


@torch.no_grad()
def evaluate(
    theta: ParamSet,
    xi: ParamSet,
    pairs,
    cfg: TrainConfig,
    seed: int = 0,
    views_per_pair: int = VIEWS_PER_PAIR,
) -> dict:
    """Report with rotation accuracy, mean flow loss and mean positive-pair cosine."""
    pairs = list(pairs)
    preds, labels = rotation_predictions(theta, pairs, cfg, seed, views_per_pair)
    flows = [float(temporal_loss(cfg, p, theta, xi, None)) for p in pairs]
    cosines = []
    for i, p in enumerate(pairs):
        try:
            cosines.append(positive_cosine(theta, p.curr, cfg, rngmod.stream(seed, "eval-cosine", i)))
        except DegenerateScene:
            pass
    return {
        "rotation_accuracy": float(np.mean(preds == labels)) if len(preds) else 0.0,
        "rotation_correct": int(np.sum(preds == labels)),
        "rotation_total": int(len(preds)),
        "mean_flow_l2": float(np.mean(flows)) if flows else 0.0,
        "mean_positive_cosine": float(np.mean(cosines)) if cosines else 0.0,
        "pair_count": len(pairs),
    }
