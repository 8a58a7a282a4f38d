from types import SimpleNamespace

import numpy as np
import pytest
from scipy.special import softmax

from scene_completion.errors import ArgumentError, NumericError, UsageError
from scene_completion.losses import (LossWeights, consistency_loss, consistency_losses, geometric_loss,
                                     geometric_losses, occupancy_logits, semantic_loss, semantic_losses,
                                     stable_logsoftmax, total_loss)
from scene_completion.sampling import TargetKind

N_LOGITS = 4


# ======================================================= #
# Naive references
# ======================================================= #
def naive_semantic(z, w, class_id):
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return -np.log(np.sum(w * p[:, class_id - 1]))


def naive_geometric(z, w, occupied):
    e = np.exp(z)
    part = e[:, :-1].sum(axis=-1) if occupied else e[:, -1]
    p = np.sum(w * part / e.sum(axis=-1))
    return -np.log(p)


def naive_consistency(z):
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    m = p.mean(axis=0)

    def entropy(q):
        return -np.sum(q * np.log(q), axis=-1)

    return entropy(m) - entropy(p).mean()


def random_case(rng, s=None, scale=20.0):
    s = s or int(rng.integers(1, 5))
    z = rng.uniform(-scale, scale, size=(s, N_LOGITS))
    w = rng.dirichlet(np.ones(s)) if s > 1 else np.ones(1)
    return z, w


def numeric_grad(fn, z, h=1e-5):
    grad = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, down = z.copy(), z.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


# ======================================================= #
# Stable vs naive
# ======================================================= #
def test_semantic_matches_naive():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z, w = random_case(rng)
        class_id = int(rng.integers(1, N_LOGITS))
        loss, _ = semantic_loss(z, w, class_id)
        assert abs(loss - naive_semantic(z, w, class_id)) <= 1e-10 * max(1.0, abs(loss))


def test_geometric_matches_naive():
    rng = np.random.default_rng(1)
    for _ in range(200):
        z, w = random_case(rng)
        occupied = bool(rng.integers(2))
        loss, _ = geometric_loss(z, w, occupied)
        assert abs(loss - naive_geometric(z, w, occupied)) <= 1e-10 * max(1.0, abs(loss))


def test_consistency_matches_naive():
    rng = np.random.default_rng(2)
    for _ in range(200):
        z, _ = random_case(rng, s=int(rng.integers(2, 5)), scale=10.0)
        loss, _ = consistency_loss(z)
        assert abs(loss - naive_consistency(z)) <= 1e-10


def test_extreme_logits_stay_finite():
    z = np.array([[1e4, -1e4, 0.0, -1e4], [-1e4, 1e4, 1e4, 0.0]])
    w = np.array([0.5, 0.5])
    for loss, grad in (semantic_loss(z, w, 2), geometric_loss(z, w, True), geometric_loss(z, w, False),
                       consistency_loss(z)):
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))


def test_zero_weight_support_is_ignored():
    z = np.array([[0.0, 1.0, 2.0, 3.0], [5.0, -5.0, 0.0, 0.0]])
    loss, grad = semantic_loss(z, np.array([1.0, 0.0]), 1)
    single, _ = semantic_loss(z[:1], np.array([1.0]), 1)
    assert loss == pytest.approx(single, abs=1e-12)
    assert np.allclose(grad[1], 0.0)


def test_occupancy_logits_identity():
    rng = np.random.default_rng(3)
    z = rng.normal(0.0, 3.0, size=(10, N_LOGITS))
    pair = softmax(occupancy_logits(z), axis=-1)
    full = softmax(z, axis=-1)
    assert np.allclose(pair[:, 0], full[:, :-1].sum(axis=1), atol=1e-12)
    assert np.allclose(pair[:, 1], full[:, -1], atol=1e-12)


def test_stable_logsoftmax_normalizes():
    z = np.array([[1000.0, 0.0, -1000.0]])
    assert np.exp(stable_logsoftmax(z)).sum() == pytest.approx(1.0)


# ======================================================= #
# Gradients
# ======================================================= #
@pytest.mark.parametrize("term", ["semantic", "occupied", "free", "consistency"])
def test_gradients_match_finite_differences(term):
    rng = np.random.default_rng(4)
    for _ in range(20):
        z, w = random_case(rng, s=int(rng.integers(2, 5)), scale=3.0)
        if term == "semantic":
            def fn(x):
                return semantic_loss(x, w, 2)
        elif term == "occupied":
            def fn(x):
                return geometric_loss(x, w, True)
        elif term == "free":
            def fn(x):
                return geometric_loss(x, w, False)
        else:
            def fn(x):
                return consistency_loss(x)

        _, grad = fn(z)
        numeric = numeric_grad(lambda x: fn(x)[0], z)
        assert np.max(np.abs(grad - numeric)) <= 1e-4 * max(1.0, np.max(np.abs(numeric)))


def test_batched_terms_match_single():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, 4, N_LOGITS))
    w = rng.dirichlet(np.ones(4), size=6)
    ids = rng.integers(1, N_LOGITS, size=6)
    losses, grads = semantic_losses(z, w, ids)
    for i in range(6):
        loss, grad = semantic_loss(z[i], w[i], int(ids[i]))
        assert losses[i] == pytest.approx(loss)
        assert np.allclose(grads[i], grad)
    occupied = rng.integers(2, size=6).astype(bool)
    losses, _ = geometric_losses(z, w, occupied)
    assert losses[0] == pytest.approx(geometric_loss(z[0], w[0], bool(occupied[0]))[0])
    losses, _ = consistency_losses(z)
    assert np.all(losses >= -1e-12)


# ======================================================= #
# Errors
# ======================================================= #
def test_semantic_rejects_free_target():
    z, w = np.zeros((2, N_LOGITS)), np.array([0.5, 0.5])
    with pytest.raises(UsageError):
        semantic_loss(z, w, N_LOGITS)
    with pytest.raises(ArgumentError):
        semantic_loss(z, w, 0)


def test_consistency_needs_two_supports():
    with pytest.raises(ArgumentError):
        consistency_loss(np.zeros((1, N_LOGITS)))


def test_weight_shape_mismatch():
    with pytest.raises(ArgumentError):
        semantic_loss(np.zeros((2, N_LOGITS)), np.ones(3) / 3, 1)


def test_loss_weights_validation():
    with pytest.raises(ArgumentError):
        LossWeights(lambda_s=-1.0)


# ======================================================= #
# Batch objective
# ======================================================= #
def make_batch(rng, n=12, s=4):
    kinds = np.array([TargetKind.SEMANTIC, TargetKind.OCCUPIED_UNLABELED, TargetKind.FREE,
                      TargetKind.CONSISTENCY] * (n // 4), dtype=np.int8)
    class_ids = np.where(kinds == TargetKind.SEMANTIC, rng.integers(1, N_LOGITS, size=n), -1)
    region = SimpleNamespace(weights=rng.dirichlet(np.ones(s), size=n))
    return SimpleNamespace(kinds=kinds, class_ids=class_ids, region=region), rng.normal(size=(n, s, N_LOGITS))


def test_total_loss_gradient():
    rng = np.random.default_rng(6)
    batch, z = make_batch(rng)
    weights = LossWeights(7.5, 2.0, 1.0)
    report, grad = total_loss(batch, z, weights)
    numeric = numeric_grad(lambda x: total_loss(batch, x, weights)[0].objective, z)
    assert np.max(np.abs(grad - numeric)) <= 1e-4 * max(1.0, np.max(np.abs(numeric)))
    assert report.counts["semantic"] == 3
    assert report.counts["consistency"] == 3


def test_sum_reduction_objective_is_total():
    rng = np.random.default_rng(7)
    batch, z = make_batch(rng)
    report, _ = total_loss(batch, z, reduction="sum")
    assert report.objective == pytest.approx(report.total)
    w = LossWeights()
    assert report.total == pytest.approx(w.lambda_s * report.semantic + w.lambda_g * report.geometric
                                         + w.lambda_c * report.consistency)


def test_zero_lambda_drops_term_gradient():
    rng = np.random.default_rng(8)
    batch, z = make_batch(rng)
    _, grad = total_loss(batch, z, LossWeights(0.0, 0.0, 1.0))
    _, only_c = consistency_losses(z)
    assert np.allclose(grad, only_c / len(z))


def test_total_loss_rejects_nan():
    rng = np.random.default_rng(9)
    batch, z = make_batch(rng)
    z[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        total_loss(batch, z)


def test_total_loss_rejects_unknown_reduction():
    rng = np.random.default_rng(10)
    batch, z = make_batch(rng)
    with pytest.raises(ArgumentError):
        total_loss(batch, z, reduction="max")


def test_all_zero_weights_are_rejected():
    z = np.array([[0.0, 1.0, 2.0, 3.0], [5.0, -5.0, 0.0, 0.0]])
    with pytest.raises(ArgumentError):
        semantic_loss(z, np.array([0.0, 0.0]), 1)
    with pytest.raises(ArgumentError):
        geometric_loss(z, np.array([0.0, 0.0]), True)
    with pytest.raises(ArgumentError):
        semantic_loss(z, np.array([1.5, -0.5]), 1)


# ======================================================= #
# Jensen-Shannon edge cases
# ======================================================= #
@pytest.mark.parametrize("scale", [1.0, 1e4])
def test_consistency_of_identical_supports_is_zero(scale):
    rng = np.random.default_rng(11)
    for m in (2, 3, 4):
        row = rng.uniform(-scale, scale, size=N_LOGITS)
        loss, grad = consistency_loss(np.tile(row, (m, 1)))
        assert abs(loss) <= 1e-12
        assert np.allclose(grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("gap", [40.0, 100.0, 1e4])
def test_consistency_of_opposite_certain_supports_is_log2(gap):
    # softmax outputs [1 - eps, eps] and [eps, 1 - eps]
    z = np.array([[gap, 0.0], [0.0, gap]])
    loss, grad = consistency_loss(z)
    assert loss == pytest.approx(np.log(2.0), abs=1e-8)
    assert np.all(np.isfinite(grad))


@pytest.mark.parametrize("scale", [3.0, 30.0, 1e4])
def test_consistency_is_bounded_by_log_m(scale):
    rng = np.random.default_rng(12)
    z = rng.uniform(-scale, scale, size=(2000, 4, N_LOGITS))
    losses, grads = consistency_losses(z)
    assert np.all(losses >= -1e-12)
    assert np.all(losses <= np.log(4) + 1e-12)
    assert np.all(np.isfinite(grads))
    pair, _ = consistency_losses(z[:, :2])
    assert np.all(pair <= np.log(2) + 1e-12)
