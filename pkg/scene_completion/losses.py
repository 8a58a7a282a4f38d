"""
Losses
Semantic, geometric and consistency terms computed in log-space, with exact logit gradients

All functions take support logits of shape (n, S, N+1) (free-space logit last) and bilinear
weights of shape (n, S); single-target helpers accept (S, N+1) and (S,).
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import ArgumentError, NumericError, UsageError
from .sampling import TargetKind

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 7.5
    lambda_g: float = 2.0
    lambda_c: float = 1.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_g", "lambda_c"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ArgumentError(f"{name} must be a finite value >= 0, got {value}")


@dataclass
class LossReport:
    """Per-term sums (unnormalized), per-term means and the optimized objective"""

    total: float
    semantic: float
    geometric: float
    consistency: float
    semantic_mean: float
    geometric_mean: float
    consistency_mean: float
    objective: float
    reduction: str = "mean"
    counts: Dict[str, int] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        row = {
            "objective": self.objective, "total": self.total, "semantic": self.semantic,
            "geometric": self.geometric, "consistency": self.consistency,
            "semantic_mean": self.semantic_mean, "geometric_mean": self.geometric_mean,
            "consistency_mean": self.consistency_mean,
        }
        row.update({f"n_{k}": v for k, v in self.counts.items()})
        return row


# ======================================================= #
# Stable building blocks
# ======================================================= #
def stable_logsoftmax(z) -> np.ndarray:
    """z_i - b - log sum_j exp(z_j - b) with b = max(z), along the last axis"""
    return log_softmax(np.asarray(z, dtype=np.float64), axis=-1)


def weighted_log_mean(log_p: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """log sum_a w_a exp(log_p_a) over the support axis; (n, S, K), (n, S) -> (n, K)"""
    return logsumexp(log_p, axis=1, b=weights[..., None])


def _as_batch(support_logits, weights=None):
    z = np.asarray(support_logits, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.ndim != 3:
        raise ArgumentError(f"support logits must have shape (n, S, K), got {z.shape}")
    if weights is None:
        return z, None, single
    w = np.asarray(weights, dtype=np.float64)
    if single:
        w = w[None]
    if w.shape != z.shape[:2]:
        raise ArgumentError(f"{w.shape} weights for support logits of shape {z.shape}")
    if np.any(w < 0) or np.any(np.sum(w, axis=1) <= 0):
        raise ArgumentError("support weights must be >= 0 with a positive sum per target")
    return z, w, single


def _mixture_ce(log_q: np.ndarray, w: np.ndarray, target: np.ndarray):
    """
    -log of the weighted mixture probability of `target`, plus d/d(per-support logits)

    log_q: (n, S, C) per-support log-probabilities, target: (n,) column index
    """
    rows = np.arange(len(target))
    log_mix = weighted_log_mean(log_q, w)[rows, target]
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    # responsibility of each support for the target class
    resp = np.exp(log_w + log_q[rows, :, target] - log_mix[:, None])
    onehot = np.zeros(log_q.shape[::2])
    onehot[rows, target] = 1.0
    grad = -resp[..., None] * (onehot[:, None, :] - np.exp(log_q))
    return -log_mix, grad


# ======================================================= #
# Loss terms
# ======================================================= #
def semantic_losses(support_logits, weights, class_ids):
    """Cross-entropy of the composed prediction against one-hot class ids (1..N)"""
    z, w, _ = _as_batch(support_logits, weights)
    class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    n_logits = z.shape[-1]
    if np.any(class_ids == n_logits):
        raise UsageError("semantic loss is not evaluated for free-space targets")
    if np.any((class_ids < 1) | (class_ids > n_logits)):
        raise ArgumentError(f"class ids must be in 1..{n_logits - 1}")
    return _mixture_ce(stable_logsoftmax(z), w, class_ids - 1)


def semantic_loss(support_logits, weights, class_id: int) -> Tuple[float, np.ndarray]:
    losses, grad = semantic_losses(np.asarray(support_logits)[None], np.asarray(weights)[None], [class_id])
    return float(losses[0]), grad[0]


def occupancy_logits(z: np.ndarray) -> np.ndarray:
    """[z_occupied, z_free] with z_occupied = b + log sum_i exp(z_i - b) over the N semantic logits"""
    return np.stack([logsumexp(z[..., :-1], axis=-1), z[..., -1]], axis=-1)


def geometric_losses(support_logits, weights, occupied):
    """Binary cross-entropy of the composed occupied/free probabilities"""
    z, w, _ = _as_batch(support_logits, weights)
    occupied = np.asarray(occupied, dtype=bool).reshape(-1)
    log_q = stable_logsoftmax(occupancy_logits(z))
    target = np.where(occupied, 0, 1)
    losses, d_pair = _mixture_ce(log_q, w, target)

    grad = np.empty_like(z)
    grad[..., :-1] = d_pair[..., :1] * np.exp(stable_logsoftmax(z[..., :-1]))
    grad[..., -1] = d_pair[..., 1]
    return losses, grad


def geometric_loss(support_logits, weights, occupied: bool) -> Tuple[float, np.ndarray]:
    losses, grad = geometric_losses(np.asarray(support_logits)[None], np.asarray(weights)[None], [occupied])
    return float(losses[0]), grad[0]


def consistency_losses(support_logits):
    """Jensen-Shannon divergence of the M per-support distributions"""
    z, _, _ = _as_batch(support_logits)
    m = z.shape[1]
    if m < 2:
        raise ArgumentError(f"consistency loss needs at least 2 supports, got {m}")

    ls = stable_logsoftmax(z)
    p = np.exp(ls)
    log_mean = logsumexp(ls, axis=1) - np.log(m)
    # H(mean) - mean H  ==  mean over supports of KL(P_a || mean)
    gap = ls - log_mean[:, None, :]
    losses = np.einsum("nak,nak->n", p, gap) / m

    dp = gap / m
    grad = p * (dp - np.sum(p * dp, axis=-1, keepdims=True))
    return losses, grad


def consistency_loss(support_logits) -> Tuple[float, np.ndarray]:
    losses, grad = consistency_losses(np.asarray(support_logits)[None])
    return float(losses[0]), grad[0]


# ======================================================= #
# Batch objective
# ======================================================= #
def _check_finite(losses: np.ndarray, kinds: np.ndarray, term: str):
    bad = ~np.isfinite(losses)
    if np.any(bad):
        kind = TargetKind(int(kinds[np.argmax(bad)])).name
        raise NumericError(f"non-finite {term} loss for a {kind} target ({int(bad.sum())} affected)")


def total_loss(batch, logits, weights: LossWeights = None, reduction: str = "mean"):
    """
    Weighted objective of one batch and its gradient w.r.t. the support logits

    Args:
        batch: TrainingBatch (kinds, class ids and support weights)
        logits: (n, S, N+1) support logits of the batch
        weights: term weights lambda_S, lambda_G, lambda_C
        reduction: "mean" optimizes per-term means, "sum" the plain weighted sum

    Returns:
        (LossReport, d objective / d logits)
    """
    weights = weights or LossWeights()
    if reduction not in REDUCTIONS:
        raise ArgumentError(f"reduction must be one of {REDUCTIONS}, got '{reduction}'")
    z = np.asarray(logits, dtype=np.float64)
    w = batch.region.weights
    kinds = np.asarray(batch.kinds)
    if len(z) == 0:
        raise ArgumentError("empty batch")

    grad = np.zeros_like(z)
    sums = {}
    counts = {}

    sem = kinds == TargetKind.SEMANTIC
    counts["semantic"] = int(sem.sum())
    sums["semantic"] = 0.0
    if counts["semantic"]:
        losses, g = semantic_losses(z[sem], w[sem], batch.class_ids[sem])
        _check_finite(losses, kinds[sem], "semantic")
        sums["semantic"] = float(losses.sum())
        scale = weights.lambda_s / (counts["semantic"] if reduction == "mean" else 1)
        grad[sem] += scale * g

    geo = kinds != TargetKind.CONSISTENCY
    counts["geometric"] = int(geo.sum())
    sums["geometric"] = 0.0
    if counts["geometric"]:
        losses, g = geometric_losses(z[geo], w[geo], kinds[geo] != TargetKind.FREE)
        _check_finite(losses, kinds[geo], "geometric")
        sums["geometric"] = float(losses.sum())
        scale = weights.lambda_g / (counts["geometric"] if reduction == "mean" else 1)
        grad[geo] += scale * g

    counts["consistency"] = len(z) if z.shape[1] >= 2 else 0
    sums["consistency"] = 0.0
    if counts["consistency"]:
        losses, g = consistency_losses(z)
        _check_finite(losses, kinds, "consistency")
        sums["consistency"] = float(losses.sum())
        scale = weights.lambda_c / (counts["consistency"] if reduction == "mean" else 1)
        grad += scale * g

    means = {k: sums[k] / counts[k] if counts[k] else 0.0 for k in sums}
    total = weights.lambda_s * sums["semantic"] + weights.lambda_g * sums["geometric"] + weights.lambda_c * sums["consistency"]
    if reduction == "mean":
        objective = (weights.lambda_s * means["semantic"] + weights.lambda_g * means["geometric"]
                     + weights.lambda_c * means["consistency"])
    else:
        objective = total

    kind_counts = {kind.name.lower(): int(np.sum(kinds == kind)) for kind in TargetKind}
    report = LossReport(
        total=total, semantic=sums["semantic"], geometric=sums["geometric"], consistency=sums["consistency"],
        semantic_mean=means["semantic"], geometric_mean=means["geometric"], consistency_mean=means["consistency"],
        objective=objective, reduction=reduction, counts=kind_counts,
    )
    return report, grad
