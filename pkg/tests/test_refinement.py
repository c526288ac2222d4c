"""Soft-label refinement: neighbour weights, convex blending, full-pass matrix."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncplr import (
    AffinityGraph,
    PseudoLabelSet,
    RefineConfig,
    StalenessError,
    SyntheticSpec,
    UsageError,
    build_affinity_graph,
    dbscan,
    generate_synthetic,
    init_prediction_bank,
    neighbor_weights,
    refine_all,
    refine_label,
)
from oracles import oracle_refine


def graph_with_row(distances: list[float]) -> AffinityGraph:
    n = len(distances) + 1
    j = np.full((n, n), 0.99)
    np.fill_diagonal(j, 0.0)
    for k, d in enumerate(distances, start=1):
        j[0, k] = j[k, 0] = d
    return AffinityGraph(jaccard=j, kappa=2)


def test_distance_softmax_prefers_far_neighbours():
    g = graph_with_row([0.1, 0.3])
    w = neighbor_weights(g, np.array([1, 2]), anchor=0, strategy="distance-softmax", tau_d=0.05)
    # softmax over (0.1/0.05, 0.3/0.05) = (2, 6)
    np.testing.assert_allclose(w, [0.0180, 0.9820], atol=5e-5)
    assert w[1] > w[0]


def test_equal_distances_give_uniform_weights():
    g = graph_with_row([0.2, 0.2, 0.2])
    nbrs = np.array([1, 2, 3])
    for strategy in ("average", "distance-softmax"):
        w = neighbor_weights(g, nbrs, anchor=0, strategy=strategy, tau_d=0.05)
        np.testing.assert_allclose(w, np.full(3, 1.0 / 3.0), atol=1e-12)


def test_single_neighbour_weight_one():
    g = graph_with_row([0.4])
    for strategy in ("average", "distance-softmax"):
        w = neighbor_weights(g, np.array([1]), anchor=0, strategy=strategy, tau_d=0.05)
        np.testing.assert_array_equal(w, [1.0])


def test_empty_neighbour_list_rejected():
    g = graph_with_row([0.4])
    with pytest.raises(UsageError):
        neighbor_weights(g, np.array([], dtype=np.int64), anchor=0)


def test_refine_label_alpha_endpoints():
    y = np.array([1.0, 0.0])
    preds = np.array([[0.3, 0.7]])
    w = np.array([1.0])
    np.testing.assert_array_equal(refine_label(y, preds, w, alpha=1.0), y)
    np.testing.assert_array_equal(refine_label(y, preds, w, alpha=0.0), [0.3, 0.7])


def test_refine_label_hand_example():
    y = np.array([1.0, 0.0])
    preds = np.array([[0.6, 0.4], [0.2, 0.8]])
    w = np.array([0.5, 0.5])
    np.testing.assert_allclose(refine_label(y, preds, w, alpha=0.5), [0.7, 0.3], atol=1e-12)


def test_refine_label_empty_neighbourhood_returns_hard_label():
    y = np.array([0.0, 1.0, 0.0])
    out = refine_label(y, np.zeros((0, 3)), np.zeros(0), alpha=0.3)
    np.testing.assert_array_equal(out, y)
    assert out is not y


def test_refine_label_shape_mismatch():
    y = np.array([1.0, 0.0])
    with pytest.raises(UsageError):
        refine_label(y, np.array([[0.2, 0.3, 0.5]]), np.array([1.0]), alpha=0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_refine_label_stays_on_simplex(seed, alpha):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    m = int(rng.integers(1, 5))
    y = np.zeros(k)
    y[rng.integers(k)] = 1.0
    preds = rng.dirichlet(np.ones(k), size=m)
    w = rng.dirichlet(np.ones(m))
    out = refine_label(y, preds, w, alpha)
    assert out.min() >= 0.0
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-9)


def test_agreeing_neighbours_leave_label_fixed():
    rng = np.random.default_rng(5)
    for alpha in (0.0, 0.3, 0.9):
        y = np.array([0.0, 1.0, 0.0])
        preds = np.tile(y, (4, 1))
        w = rng.dirichlet(np.ones(4))
        np.testing.assert_allclose(refine_label(y, preds, w, alpha), y, atol=1e-12)


def test_argmax_preserved_above_half():
    rng = np.random.default_rng(17)
    for _ in range(500):
        k = int(rng.integers(2, 7))
        y = np.zeros(k)
        hard = int(rng.integers(k))
        y[hard] = 1.0
        m = int(rng.integers(1, 6))
        preds = rng.dirichlet(np.ones(k), size=m)
        w = rng.dirichlet(np.ones(m))
        alpha = float(rng.uniform(0.5 + 1e-6, 1.0))
        assert int(np.argmax(refine_label(y, preds, w, alpha))) == hard


def clustered_instance(seed: int = 0):
    fs = generate_synthetic(SyntheticSpec(3, 8, 8, 0.15, 1, seed))
    g = build_affinity_graph(fs, kappa=8)
    pls = dbscan(g, eps=0.6, min_samples=3)
    assert pls.num_clusters >= 2
    return fs, g, pls


def test_refine_all_isolated_rows_are_one_hot():
    # pairwise distances all above rho: every anchor falls back to its hard label
    j = np.full((6, 6), 0.9)
    np.fill_diagonal(j, 0.0)
    g = AffinityGraph(jaccard=j, kappa=2)
    pls = PseudoLabelSet(assignment=np.array([0, 0, 1, 1, 2, 2]), num_clusters=3)
    bank = init_prediction_bank(pls)
    bank.student[:] = np.random.default_rng(0).dirichlet(np.ones(3), size=6)
    out = refine_all(pls, bank, g, RefineConfig(alpha=0.2, rho=1e-9, strategy="average", tau_d=0.05))
    expect = np.zeros((6, 3))
    expect[np.arange(6), pls.assignment] = 1.0
    np.testing.assert_array_equal(out.targets, expect)


def test_refine_all_matches_straight_line_oracle():
    for seed in (0, 1, 2):
        fs, g, pls = clustered_instance(seed)
        bank = init_prediction_bank(pls)
        rng = np.random.default_rng(seed + 50)
        bank.student[:] = rng.dirichlet(np.ones(pls.num_clusters), size=bank.student.shape[0])
        for strategy in ("average", "distance-softmax"):
            cfg = RefineConfig(alpha=0.2, rho=0.5, strategy=strategy, tau_d=0.05)
            out = refine_all(pls, bank, g, cfg)
            ref = oracle_refine(pls.assignment, pls.num_clusters, bank.student,
                                g.jaccard, 0.2, 0.5, strategy, 0.05)
            np.testing.assert_allclose(out.targets, ref, atol=1e-12)


def test_refine_all_rows_subset():
    fs, g, pls = clustered_instance()
    bank = init_prediction_bank(pls)
    cfg = RefineConfig(alpha=0.2, rho=0.5, strategy="average", tau_d=0.05)
    rows = pls.inliers[:5]
    out = refine_all(pls, bank, g, cfg, rows=rows)
    full = refine_all(pls, bank, g, cfg)
    pos = {int(r): k for k, r in enumerate(full.indices)}
    for k, r in enumerate(rows):
        np.testing.assert_array_equal(out.targets[k], full.targets[pos[int(r)]])


def test_refine_all_stale_bank_rejected():
    fs, g, pls = clustered_instance()
    bigger = PseudoLabelSet(
        assignment=np.arange(pls.num_clusters + 1), num_clusters=pls.num_clusters + 1)
    bank = init_prediction_bank(bigger)
    with pytest.raises(StalenessError):
        refine_all(pls, bank, g, RefineConfig(alpha=0.2, rho=0.5, strategy="average", tau_d=0.05))


def test_prediction_bank_init_rows():
    pls = PseudoLabelSet(assignment=np.array([1, -1, 0]), num_clusters=2)
    bank = init_prediction_bank(pls)
    np.testing.assert_array_equal(bank.student[0], [0.0, 1.0])
    np.testing.assert_array_equal(bank.student[2], [1.0, 0.0])
    np.testing.assert_array_equal(bank.student[1], [0.5, 0.5])
    np.testing.assert_array_equal(bank.teacher, bank.student)


def test_prediction_bank_update_stamps():
    pls = PseudoLabelSet(assignment=np.array([0, 1, 1]), num_clusters=2)
    bank = init_prediction_bank(pls)
    rows = np.array([0, 2])
    student = np.array([[0.9, 0.1], [0.4, 0.6]])
    teacher = np.array([[0.8, 0.2], [0.3, 0.7]])
    bank.update(rows, student, teacher, stamp=7)
    np.testing.assert_array_equal(bank.student[rows], student)
    np.testing.assert_array_equal(bank.teacher[rows], teacher)
    np.testing.assert_array_equal(bank.freshness[rows], 7)
    assert bank.freshness[1] != 7


def test_refine_config_validation():
    from ncplr import ConfigError

    with pytest.raises(ConfigError):
        RefineConfig(alpha=1.5, rho=0.2, strategy="average", tau_d=0.05)
    with pytest.raises(ConfigError):
        RefineConfig(alpha=0.2, rho=0.0, strategy="average", tau_d=0.05)
    with pytest.raises(ConfigError):
        RefineConfig(alpha=0.2, rho=0.2, strategy="nearest", tau_d=0.05)
