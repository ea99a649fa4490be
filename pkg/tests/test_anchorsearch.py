import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from biskdet.anchorsearch import (
    AnchorConfig, AnchorShape, cluster_anchor_shapes, clustering_objective, compute_anchor_hyperparameters,
    jaccard_center, merge_scales, nearest_template,
)


def shape_cost(wh, c):
    """Summed 1 - IoU of co-centred shapes; written out independently of the library."""
    total = 0.0
    for w, h in wh:
        inter = min(w, c[0]) * min(h, c[1])
        total += 1.0 - inter / (w * h + c[0] * c[1] - inter)
    return total


def exhaustive_optimum(wh, k):
    """Best objective over every partition of the boxes into at most k groups."""
    n = len(wh)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0:
            continue
        total = 0.0
        for g in range(k):
            members = wh[np.array(labels) == g]
            if len(members):
                total += shape_cost(members, jaccard_center(members))
        best = min(best, total)
    return best


def random_instance(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(1, 9))
    k = int(g.integers(1, min(2, n) + 1))
    return g.uniform(4, 120, size=(n, 2)).round(1), k


@pytest.mark.parametrize("seed", range(0, 100, 10))
def test_objective_matches_exhaustive_partition(seed):
    for s in range(seed, seed + 10):
        wh, k = random_instance(s)
        cents = cluster_anchor_shapes(wh, k, seed=s)
        got = clustering_objective(wh, np.array([[c.width, c.height] for c in cents]))
        assert got == pytest.approx(exhaustive_optimum(wh, k), abs=1e-9)


@pytest.mark.parametrize("seed", range(30))
def test_group_centre_against_continuous_search(seed):
    wh = np.random.default_rng(seed).uniform(4, 120, size=(int(seed % 7) + 2, 2))
    grid = jaccard_center(wh)
    best = shape_cost(wh, grid)
    for start in list(wh) + [wh.mean(axis=0), np.median(wh, axis=0)]:
        res = minimize(lambda c: shape_cost(wh, np.abs(c) + 1e-9), start, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 4000})
        assert res.fun >= best - 1e-9


def test_cluster_examples():
    wh = np.array([[10.0, 20.0], [30.0, 15.0], [50.0, 50.0]])
    cents = cluster_anchor_shapes(wh, 3)
    assert sorted((c.width, c.height) for c in cents) == sorted(map(tuple, wh))
    assert clustering_objective(wh, wh) == 0.0
    assert cluster_anchor_shapes(np.array([[7.0, 9.0]]), 1) == [AnchorShape(7.0, 9.0)]
    groups = np.array([[10.0, 10.0]] * 3 + [[80.0, 40.0]] * 4)
    assert sorted((c.width, c.height) for c in cluster_anchor_shapes(groups, 2)) == [(10.0, 10.0), (80.0, 40.0)]


def test_cluster_errors():
    with pytest.raises(ValueError):
        cluster_anchor_shapes(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        cluster_anchor_shapes(np.ones((2, 2)), 3)
    with pytest.raises(ValueError):
        AnchorShape(0, 3)


def test_worked_example_arithmetic():
    cfg = compute_anchor_hyperparameters(np.array([[100.0, 50.0]]), 1)
    assert abs(cfg.aspect_ratios[0] - 50.0 / 100.0) <= 1e-12
    assert nearest_template(100.0, cfg.templates) == 128
    assert abs(cfg.scales[0] - 100.0 / 128.0) <= 1e-12
    assert cfg.scales == [0.78125]


def test_exact_template_hit():
    cfg = compute_anchor_hyperparameters(np.array([[64.0, 64.0]] * 3), 1)
    assert cfg.aspect_ratios == [1.0] and cfg.scales == [1.0]


def test_identical_boxes_any_k():
    cfg = compute_anchor_hyperparameters(np.array([[40.0, 20.0]] * 5), 3)
    assert len(set(cfg.aspect_ratios)) == 1
    assert len(cfg.scales) == 1


def test_merge_examples():
    assert merge_scales([0.8, 0.9], 1.25) == [pytest.approx(0.85, abs=1e-15)]
    assert merge_scales([1.0, 3.0], 1.25) == [1.0, 3.0]
    assert merge_scales([], 1.25) == []
    with pytest.raises(ValueError):
        merge_scales([2.0, 1.0])
    with pytest.raises(ValueError):
        merge_scales([1.0], 1.0)


@given(st.lists(st.floats(0.1, 10.0), max_size=15), st.floats(1.05, 3.0))
def test_merge_invariants(values, threshold):
    values = sorted(values)
    out = merge_scales(values, threshold)
    assert out == sorted(out)
    assert all(b / a >= threshold for a, b in zip(out, out[1:]))
    assert _runs_cover(values, out)


def _runs_cover(values, means, start=0):
    """Whether ``values`` splits into consecutive runs whose means are ``means``."""
    if not means:
        return start == len(values)
    v = means[0]
    return any(
        abs(np.mean(values[start:end]) - v) <= 1e-9 * max(1.0, v) and _runs_cover(values, means[1:], end)
        for end in range(start + 1, len(values) + 1)
    )


@given(st.integers(0, 500), st.floats(0.25, 4.0))
def test_aspect_ratios_scale_invariant(seed, factor):
    wh = np.random.default_rng(seed).uniform(5, 100, size=(6, 2))
    a = compute_anchor_hyperparameters(wh, 2, seed=seed).aspect_ratios
    b = compute_anchor_hyperparameters(wh * factor, 2, seed=seed).aspect_ratios
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_config_round_trip_and_shapes():
    cfg = compute_anchor_hyperparameters(np.array([[100.0, 50.0], [20.0, 40.0]]), 2)
    again = AnchorConfig.from_json(cfg.to_json())
    assert again == cfg
    for w, h in cfg.shapes(64):
        assert max(w, h) in {s * 64 for s in cfg.scales}
    with pytest.raises(ValueError):
        AnchorConfig([1.0], [1.0], templates=[64, 32])
