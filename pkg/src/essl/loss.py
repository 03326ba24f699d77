"""Training objectives: point-level InfoNCE, rotation cross-entropy, flow L2 and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .voxel import BEVMap


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Bijective (i, j) pairs between view-A and view-B feature rows."""

    pairs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if (p < 0).any():
            raise ValueError("match indices must be non-negative")
        if np.unique(p[:, 0]).size != len(p) or np.unique(p[:, 1]).size != len(p):
            raise ValueError("each index may appear in at most one pair")
        object.__setattr__(self, "pairs", p)

    @classmethod
    def identity(cls, n: int) -> MatchSet:
        return cls(np.repeat(np.arange(n)[:, None], 2, axis=1))

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class LossWeights:
    lambda_pnce: float = 0.01
    lambda_ce: float = 1.0
    lambda_flow: float = 300.0
    tau: float = 1.0

    def __post_init__(self):
        for name in ("lambda_pnce", "lambda_ce", "lambda_flow"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class LossReport:
    l_pnce: float
    l_ce: float
    l_flow: float
    total: float


def point_info_nce(
    feats_a: torch.Tensor, feats_b: torch.Tensor, matches: MatchSet, tau: float = 1.0
) -> torch.Tensor:
    """Mean over pairs of ``-log(exp(x_i.x_j / tau) / sum_k exp(x_i.x_k / tau))``.

    ``k`` runs over the view-B side of every pair, the positive included.
    """
    if len(matches) == 0:
        raise ValueError("PointInfoNCE needs at least one matched pair")
    idx = torch.from_numpy(matches.pairs)
    a = feats_a[idx[:, 0]]
    b = feats_b[idx[:, 1]]
    logits = a @ b.T / tau
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def rotation_ce(logits: torch.Tensor, label: int) -> torch.Tensor:
    n = logits.shape[-1]
    if not 0 <= label < n:
        raise ValueError(f"label {label} outside [0, {n})")
    m = logits.detach().max()
    return m + torch.log(torch.exp(logits - m).sum()) - logits[label]


def _unit_cells(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


def flow_l2(z_prev: BEVMap, y_t: BEVMap) -> torch.Tensor:
    """Mean over H*W cells of the squared distance between channel-normalized maps."""
    if z_prev.shape != y_t.shape:
        raise ValueError(f"map shapes differ: {z_prev.shape} vs {y_t.shape}")
    h, w, _ = z_prev.shape
    diff = _unit_cells(z_prev.data) - _unit_cells(y_t.data)
    return (diff**2).sum() / (h * w)


def weighted_total(l_pnce, l_ce, l_flow, w: LossWeights):
    return w.lambda_pnce * l_pnce + w.lambda_ce * l_ce + w.lambda_flow * l_flow


def combine(l_pnce: float, l_ce: float, l_flow: float, w: LossWeights) -> LossReport:
    terms = [float(v) for v in (l_pnce, l_ce, l_flow)]
    if not all(math.isfinite(v) for v in terms):
        raise ValueError(f"non-finite loss term in {terms}")
    return LossReport(*terms, weighted_total(*terms, w))

