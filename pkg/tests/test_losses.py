"""Loss values, analytic gradients vs central differences, bank updates."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncplr import (
    LossConfig,
    MemoryBank,
    StalenessError,
    UsageError,
    cross_entropy,
    info_nce,
    memory_update,
    ncr_loss,
    total_loss,
)
from oracles import central_difference, max_relative_error


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_bank(rng: np.random.Generator, k: int, d: int) -> MemoryBank:
    c = rng.normal(size=(k, d))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return MemoryBank(centroids=c, gamma=0.9, tau=0.05)


# ---------------------------------------------------------------- cross_entropy

def test_ce_perfect_prediction_zero():
    t = np.array([[0.0, 1.0, 0.0]])
    assert cross_entropy(t.copy(), t).value == 0.0


def test_ce_uniform_prediction_log_k():
    for k in (2, 3, 7):
        preds = np.full((4, k), 1.0 / k)
        rng = np.random.default_rng(k)
        targets = rng.dirichlet(np.ones(k), size=4)
        np.testing.assert_allclose(cross_entropy(preds, targets).value, np.log(k), atol=1e-12)


def test_ce_hand_example():
    preds = np.array([[0.5, 0.5]])
    targets = np.array([[0.7, 0.3]])
    np.testing.assert_allclose(cross_entropy(preds, targets).value, np.log(2.0), atol=1e-12)


def test_ce_gibbs_inequality():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k = int(rng.integers(2, 8))
        t = rng.dirichlet(np.ones(k))
        p = rng.dirichlet(np.ones(k))
        ce = cross_entropy(p[None], t[None]).value
        entropy = -np.sum(t * np.log(t))
        assert ce >= entropy - 1e-12


def test_ce_gradient_matches_fd():
    rng = np.random.default_rng(7)
    for _ in range(5):
        b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        z = rng.normal(size=(b, k))
        targets = rng.dirichlet(np.ones(k), size=b)
        analytic = cross_entropy(softmax(z), targets).grads["logits"]
        numeric = central_difference(lambda zz: cross_entropy(softmax(zz), targets).value, z)
        assert max_relative_error(analytic, numeric) < 1e-4


def test_ce_shape_mismatch():
    with pytest.raises(UsageError):
        cross_entropy(np.ones((2, 3)) / 3.0, np.ones((2, 4)) / 4.0)


# -------------------------------------------------------------------- info_nce

def test_info_nce_single_cluster_zero():
    rng = np.random.default_rng(0)
    bank = random_bank(rng, 1, 4)
    f = rng.normal(size=(3, 4))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    assert info_nce(f, np.zeros(3, dtype=np.int64), bank).value == 0.0


def test_info_nce_orthogonal_log_k():
    k = 5
    bank = MemoryBank(centroids=np.eye(8)[:k], gamma=0.9, tau=0.05)
    f = np.zeros((2, 8))
    f[:, k:] = 1.0
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    np.testing.assert_allclose(
        info_nce(f, np.array([0, 3]), bank).value, np.log(k), atol=1e-12)


def test_info_nce_sharp_logits_near_zero():
    # logits (1, 0) at tau=0.05 give -log(e^20 / (e^20 + 1)) = log1p(e^-20)
    bank = MemoryBank(centroids=np.eye(2), gamma=0.9, tau=0.05)
    f = np.array([[1.0, 0.0]])
    val = info_nce(f, np.array([0]), bank).value
    np.testing.assert_allclose(val, np.log1p(np.exp(-20.0)), rtol=1e-3, atol=1e-12)
    assert 0.0 < val < 1e-8


def test_info_nce_negative_permutation_invariant():
    rng = np.random.default_rng(9)
    bank = random_bank(rng, 6, 5)
    f = rng.normal(size=(4, 5))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    labels = np.array([0, 2, 4, 1])
    base = info_nce(f, labels, bank).value
    # permute the other centroids while keeping each label pointing at its row
    perm = np.array([0, 5, 2, 3, 4, 1])
    bank2 = MemoryBank(centroids=bank.centroids[perm], gamma=0.9, tau=0.05)
    inv = np.argsort(perm)
    np.testing.assert_allclose(info_nce(f, inv[labels], bank2).value, base, rtol=1e-12)


def test_info_nce_label_validation():
    rng = np.random.default_rng(1)
    bank = random_bank(rng, 3, 4)
    f = rng.normal(size=(2, 4))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    with pytest.raises(StalenessError):
        info_nce(f, np.array([0, 3]), bank)
    with pytest.raises(UsageError):
        info_nce(f, np.array([0, -1]), bank)


def test_info_nce_gradient_matches_fd():
    rng = np.random.default_rng(21)
    for _ in range(5):
        b, k, d = int(rng.integers(1, 4)), int(rng.integers(2, 5)), 6
        bank = random_bank(rng, k, d)
        f = rng.normal(size=(b, d))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        labels = rng.integers(0, k, size=b)
        analytic = info_nce(f, labels, bank).grads["embeddings"]
        numeric = central_difference(lambda ff: info_nce(ff, labels, bank).value, f.copy())
        assert max_relative_error(analytic, numeric) < 1e-4


# --------------------------------------------------------------- memory_update

def test_memory_update_endpoints():
    c0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    f = np.array([0.0, 1.0])

    bank = MemoryBank(centroids=c0.copy(), gamma=1.0, tau=0.05)
    memory_update(bank, f, 0)
    np.testing.assert_array_equal(bank.centroids[0], [1.0, 0.0])

    bank = MemoryBank(centroids=c0.copy(), gamma=0.0, tau=0.05)
    memory_update(bank, f, 0)
    np.testing.assert_array_equal(bank.centroids[0], [0.0, 1.0])


def test_memory_update_hand_example():
    bank = MemoryBank(centroids=np.array([[1.0, 0.0]]), gamma=0.5, tau=0.05)
    memory_update(bank, np.array([0.0, 1.0]), 0)
    s = np.sqrt(2.0) / 2.0
    np.testing.assert_allclose(bank.centroids[0], [s, s], atol=1e-12)


def test_memory_update_label_range():
    bank = MemoryBank(centroids=np.eye(2), gamma=0.5, tau=0.05)
    with pytest.raises(UsageError):
        memory_update(bank, np.array([1.0, 0.0]), 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_memory_update_preserves_unit_norm(seed):
    rng = np.random.default_rng(seed)
    bank = random_bank(rng, 3, 4)
    for _ in range(5):
        f = rng.normal(size=4)
        f /= np.linalg.norm(f)
        memory_update(bank, f, int(rng.integers(3)))
    np.testing.assert_allclose(np.linalg.norm(bank.centroids, axis=1), 1.0, atol=1e-9)


# ------------------------------------------------------------------- ncr_loss

def test_ncr_zero_when_teacher_equals_mean():
    teacher = np.array([[0.4, 0.6]])
    students = np.array([[0.3, 0.7], [0.5, 0.5]])
    out = ncr_loss(teacher, students, [np.array([0, 1])])
    np.testing.assert_allclose(out.value, 0.0, atol=1e-12)


def test_ncr_hand_kl():
    teacher = np.array([[1.0, 0.0]])
    students = np.array([[0.5, 0.5]])
    out = ncr_loss(teacher, students, [np.array([0])])
    np.testing.assert_allclose(out.value, np.log(2.0), atol=1e-9)


def test_ncr_all_isolated_zero():
    teacher = np.array([[1.0, 0.0], [0.0, 1.0]])
    students = np.array([[0.5, 0.5]])
    out = ncr_loss(teacher, students, [np.array([], dtype=np.int64)] * 2)
    assert out.value == 0.0
    np.testing.assert_array_equal(out.grads["student_logits"], np.zeros((1, 2)))


def test_ncr_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = int(rng.integers(2, 6))
        a, m = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        teacher = rng.dirichlet(np.ones(k), size=a)
        students = rng.dirichlet(np.ones(k), size=m)
        nbrs = [rng.choice(m, size=rng.integers(0, m + 1), replace=False) for _ in range(a)]
        assert ncr_loss(teacher, students, nbrs).value >= 0.0


def test_ncr_averages_over_nonempty_anchors_only():
    teacher = np.array([[1.0, 0.0], [1.0, 0.0]])
    students = np.array([[0.5, 0.5]])
    both = ncr_loss(teacher, students, [np.array([0]), np.array([0])])
    one = ncr_loss(teacher, students, [np.array([0]), np.array([], dtype=np.int64)])
    np.testing.assert_allclose(both.value, one.value, atol=1e-12)


def test_ncr_gradient_matches_fd():
    rng = np.random.default_rng(33)
    for _ in range(5):
        k = int(rng.integers(2, 5))
        a, m = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        teacher = rng.dirichlet(np.ones(k), size=a)
        z = rng.normal(size=(m, k))
        nbrs = [rng.choice(m, size=rng.integers(1, m + 1), replace=False) for _ in range(a)]
        analytic = ncr_loss(teacher, softmax(z), nbrs).grads["student_logits"]
        numeric = central_difference(lambda zz: ncr_loss(teacher, softmax(zz), nbrs).value, z)
        assert max_relative_error(analytic, numeric) < 1e-4


def test_ncr_rejects_non_simplex():
    with pytest.raises(UsageError):
        ncr_loss(np.array([[0.9, 0.3]]), np.array([[0.5, 0.5]]), [np.array([0])])


# ----------------------------------------------------------------- total_loss

def test_total_loss_weighting():
    from ncplr import LossValue

    g = np.ones((1, 2))
    cc = LossValue(value=1.0, grads={"embeddings": g})
    ce = LossValue(value=2.0, grads={"logits": g})
    ncr = LossValue(value=3.0, grads={"student_logits": g})

    cfg = LossConfig(lambda1=1.0, lambda2=1.0, tau=0.05, tau_d=0.05)
    assert total_loss(cc, ce, ncr, cfg).value == 6.0

    cfg0 = LossConfig(lambda1=0.5, lambda2=0.0, tau=0.05, tau_d=0.05)
    combined = total_loss(cc, ce, ncr, cfg0)
    assert combined.value == 2.0
    np.testing.assert_array_equal(combined.grads["logits"], 0.5 * g)
    np.testing.assert_array_equal(combined.grads["student_logits"], 0.0 * g)


def test_total_loss_zero():
    from ncplr import LossValue

    z = np.zeros((1, 2))
    cfg = LossConfig(lambda1=1.0, lambda2=1.0, tau=0.05, tau_d=0.05)
    out = total_loss(
        LossValue(0.0, {"embeddings": z}),
        LossValue(0.0, {"logits": z}),
        LossValue(0.0, {"student_logits": z}),
        cfg,
    )
    assert out.value == 0.0


def test_loss_config_validation():
    from ncplr import ConfigError

    with pytest.raises(ConfigError):
        LossConfig(lambda1=-0.1, lambda2=0.0, tau=0.05, tau_d=0.05)
    with pytest.raises(ConfigError):
        LossConfig(lambda1=0.0, lambda2=0.0, tau=0.0, tau_d=0.05)
