import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ce_oracle, flow_oracle, pnce_oracle

from essl.loss import LossWeights, MatchSet, combine, flow_l2, point_info_nce, rotation_ce, weighted_total
from essl.voxel import BEVMap


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_matches(rng, n_a, n_b, n):
    return MatchSet(np.stack([rng.choice(n_a, n, replace=False), rng.choice(n_b, n, replace=False)], axis=1))


def t64(x):
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def central_difference(fn, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += eps
        lo[idx] -= eps
        g[idx] = (fn(hi) - fn(lo)) / (2 * eps)
    return g


def rel_err(a, n):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6))


# --- matches and weights -----------------------------------------------------------


def test_match_set_bijective():
    with pytest.raises(ValueError):
        MatchSet([[0, 1], [0, 2]])
    with pytest.raises(ValueError):
        MatchSet([[0, 1], [2, 1]])
    with pytest.raises(ValueError):
        MatchSet([[-1, 0]])
    assert MatchSet.identity(3).pairs.tolist() == [[0, 0], [1, 1], [2, 2]]


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_pnce, w.lambda_ce, w.lambda_flow, w.tau) == (0.01, 1.0, 300.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_ce=-1.0)
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_flow=math.inf)


# --- PointInfoNCE --------------------------------------------------------------------


def test_pnce_single_pair_zero():
    x = t64([[0.6, 0.8]])
    assert point_info_nce(x, x, MatchSet.identity(1)).item() == 0.0


def test_pnce_identical_features_log4():
    x = t64(np.tile([0.0, 1.0, 0.0], (4, 1)))
    assert point_info_nce(x, x, MatchSet.identity(4), 1.0).item() == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)


def test_pnce_orthogonal_one_hot():
    x = t64(np.eye(2))
    want = math.log(1 + math.exp(-1))
    assert point_info_nce(x, x, MatchSet.identity(2), 1.0).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.313262, abs=1e-6)


def test_pnce_empty_matches():
    with pytest.raises(ValueError):
        point_info_nce(t64(np.eye(2)), t64(np.eye(2)), MatchSet(np.zeros((0, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_pnce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_a, n_b, d = rng.integers(3, 12), rng.integers(3, 12), int(rng.integers(2, 9))
    a, b = unit_rows(rng, n_a, d), unit_rows(rng, n_b, d)
    m = random_matches(rng, n_a, n_b, int(rng.integers(1, min(n_a, n_b) + 1)))
    tau = float(rng.uniform(0.05, 2.0))
    got = point_info_nce(t64(a), t64(b), m, tau).item()
    want = pnce_oracle(a.tolist(), b.tolist(), m.pairs.tolist(), tau)
    assert got == pytest.approx(want, abs=1e-10)
    assert got >= 0


@pytest.mark.parametrize("seed", range(10))
def test_pnce_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, 8, 6), unit_rows(rng, 8, 6)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    m = MatchSet.identity(8)
    base = point_info_nce(t64(a), t64(b), m, 0.5).item()
    rot = point_info_nce(t64(a @ q), t64(b @ q), m, 0.5).item()
    assert abs(base - rot) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_pnce_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    m = random_matches(rng, 5, 5, 4)
    ta, tb = t64(a).requires_grad_(True), t64(b).requires_grad_(True)
    ga, gb = torch.autograd.grad(point_info_nce(ta, tb, m, 0.7), [ta, tb])
    na = central_difference(lambda x: point_info_nce(t64(x), t64(b), m, 0.7).item(), a)
    nb = central_difference(lambda x: point_info_nce(t64(a), t64(x), m, 0.7).item(), b)
    assert rel_err(ga.numpy(), na) < 1e-4
    assert rel_err(gb.numpy(), nb) < 1e-4


# --- rotation cross-entropy -------------------------------------------------------------


def test_ce_uniform():
    assert rotation_ce(torch.zeros(10, dtype=torch.float64), 3).item() == pytest.approx(math.log(10), abs=1e-15)


def test_ce_monotone_in_true_logit():
    base = np.zeros(10)
    vals = []
    for v in (0.0, 1.0, 5.0, 20.0, 60.0):
        base[4] = v
        vals.append(rotation_ce(t64(base), 4).item())
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-20


def test_ce_label_range():
    with pytest.raises(ValueError):
        rotation_ce(torch.zeros(10), 10)
    with pytest.raises(ValueError):
        rotation_ce(torch.zeros(10), -1)


def test_ce_stable_for_large_logits():
    x = t64([1000.0, 0.0, -1000.0])
    assert rotation_ce(x, 0).item() == 0.0
    assert rotation_ce(x, 1).item() == pytest.approx(1000.0)


@pytest.mark.parametrize("seed", range(20))
def test_ce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3.0, size=10)
    c = int(rng.integers(10))
    assert rotation_ce(t64(logits), c).item() == pytest.approx(ce_oracle(logits.tolist(), c), abs=1e-12)


def test_ce_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=10)
    tx = t64(x).requires_grad_(True)
    (g,) = torch.autograd.grad(rotation_ce(tx, 2), [tx])
    n = central_difference(lambda v: rotation_ce(t64(v), 2).item(), x)
    assert rel_err(g.numpy(), n) < 1e-4


# --- flow L2 -------------------------------------------------------------------------------


def bev(x):
    return BEVMap(t64(x))


def test_flow_equal_maps_zero():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert flow_l2(bev(x), bev(x)).item() == 0.0


def test_flow_orthogonal_unit_vectors():
    assert flow_l2(bev([[[1.0, 0.0]]]), bev([[[0.0, 1.0]]])).item() == pytest.approx(2.0, abs=1e-15)


def test_flow_antipodal_is_maximum():
    x = np.random.default_rng(1).normal(size=(3, 3, 4))
    assert flow_l2(bev(x), bev(-x)).item() == pytest.approx(4.0, abs=1e-12)


def test_flow_zero_cells_pass_through():
    z = np.zeros((1, 2, 2))
    z[0, 0] = [3.0, 4.0]
    y = np.zeros((1, 2, 2))
    assert flow_l2(bev(z), bev(y)).item() == pytest.approx(0.5, abs=1e-15)


def test_flow_shape_mismatch():
    with pytest.raises(ValueError):
        flow_l2(bev(np.zeros((2, 2, 3))), bev(np.zeros((2, 3, 3))))


@pytest.mark.parametrize("seed", range(20))
def test_flow_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w, c = (int(v) for v in rng.integers(1, 6, size=3))
    z, y = rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))
    z[rng.random((h, w)) < 0.2] = 0.0
    got = flow_l2(bev(z), bev(y)).item()
    assert got == pytest.approx(flow_oracle(z.tolist(), y.tolist()), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flow_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    z, y = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    a, b = flow_l2(bev(z), bev(y)).item(), flow_l2(bev(y), bev(z)).item()
    assert 0.0 <= a <= 4.0
    assert a == b


def test_flow_zero_iff_normalized_equal():
    x = np.random.default_rng(2).normal(size=(2, 2, 3))
    scales = np.random.default_rng(3).uniform(0.1, 10, size=(2, 2, 1))
    assert flow_l2(bev(x), bev(x * scales)).item() == pytest.approx(0.0, abs=1e-15)


def test_flow_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    z, y = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    ty = t64(y).requires_grad_(True)
    (g,) = torch.autograd.grad(flow_l2(bev(z), BEVMap(ty)), [ty])
    n = central_difference(lambda v: flow_l2(bev(z), bev(v)).item(), y)
    assert rel_err(g.numpy(), n) < 1e-4


# --- weighted combination -------------------------------------------------------------------


def test_combine_examples():
    w = LossWeights()
    assert combine(0.0, 0.0, 0.0, w).total == 0.0
    assert combine(2.0, 1.0, 0.01, w).total == pytest.approx(4.02, abs=1e-12)
    ones = LossWeights(1.0, 1.0, 1.0)
    r = combine(0.25, 0.5, 0.125, ones)
    assert r.total == 0.875
    assert (r.l_pnce, r.l_ce, r.l_flow) == (0.25, 0.5, 0.125)


def test_combine_rejects_non_finite():
    with pytest.raises(ValueError):
        combine(math.nan, 0.0, 0.0, LossWeights())


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3))
def test_combine_equals_weighted_total(a, b, c):
    w = LossWeights()
    assert combine(a, b, c, w).total == weighted_total(a, b, c, w)
