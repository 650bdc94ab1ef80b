"""Multiclass surrogate losses and their score-space gradients.

A per-example loss is written in terms of the positive score ``f_y`` and a
pool of negative scores. For the BOWL family the pool term is the mean of the
``k`` largest ``phi(-f_{y'})``; for softmax cross-entropy the pool is the
positive plus the ``k`` highest-scoring negatives (all of them by default);
for the cosine contrastive loss scores are cosines and the pool term is the
mean of the ``k`` largest ``[cos - margin]_+``.

All compositions share one batched kernel, :func:`batch_loss`, so that a
single-example evaluation and a row of a batched evaluation are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .core_math import DomainError, Rng, finite_diff_gradient

__all__ = [
    "MarginLoss",
    "LossSpec",
    "PerExampleLoss",
    "BatchLoss",
    "GradientCheckReport",
    "batch_loss",
    "bowl_loss",
    "snm_loss",
    "softmax_ce_loss",
    "cosine_contrastive_loss",
    "check_gradient_at",
    "near_kink",
    "relative_error",
    "loss_gradient_check",
    "COMPOSITIONS",
]

MARGIN_KINDS = ("hinge", "squared_hinge", "logistic")
COMPOSITIONS = ("bowl", "crammer_singer", "averaged", "softmax_ce", "cosine_contrastive")


@dataclass(frozen=True)
class MarginLoss:
    """Non-increasing margin loss ``phi``.

    ``hinge``: ``[m - z]_+``; ``squared_hinge``: ``[m - z]_+ ** 2``;
    ``logistic``: ``log(1 + exp(-z))`` (the margin is not used).
    At the hinge kink ``z = m`` the right derivative 0 is used.
    """

    kind: str = "hinge"
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in MARGIN_KINDS:
            raise DomainError(f"unknown margin loss {self.kind!r}; expected one of {MARGIN_KINDS}")

    def value(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "hinge":
            return np.maximum(self.margin - z, 0.0)
        if self.kind == "squared_hinge":
            return np.maximum(self.margin - z, 0.0) ** 2
        return np.logaddexp(0.0, -z)

    def derivative(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "hinge":
            return np.where(z < self.margin, -1.0, 0.0)
        if self.kind == "squared_hinge":
            return -2.0 * np.maximum(self.margin - z, 0.0)
        return -expit(-z)

    def kink_distance(self, z):
        """Distance from ``z`` to the nearest point where ``phi`` is not C^2."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logistic":
            return np.full(z.shape, np.inf)
        return np.abs(z - self.margin)


@dataclass(frozen=True)
class LossSpec:
    """Choice of multiclass surrogate.

    ``label_top_k`` is the number of negatives averaged (``None`` means the
    whole pool). ``crammer_singer`` forces ``k = 1`` and ``averaged`` forces the
    whole pool; ``softmax_ce`` and ``cosine_contrastive`` keep the ``k``
    hardest negatives of the pool.
    """

    composition: str = "bowl"
    label_top_k: Optional[int] = 1
    base: MarginLoss = field(default_factory=MarginLoss)
    cosine_margin: float = 0.5

    def __post_init__(self):
        if self.composition not in COMPOSITIONS:
            raise DomainError(f"unknown composition {self.composition!r}; expected one of {COMPOSITIONS}")
        k = self.label_top_k
        if k is not None and (not isinstance(k, (int, np.integer)) or k < 1):
            raise DomainError(f"label_top_k must be a positive integer or None, got {k!r}")
        if self.composition == "crammer_singer" and k not in (None, 1):
            raise DomainError("crammer_singer requires label_top_k = 1")

    def resolve_k(self, pool_size: int) -> int:
        """Number of negatives averaged for a pool of ``pool_size`` negatives."""
        if pool_size < 1:
            raise DomainError("the negative pool is empty")
        if self.composition == "crammer_singer":
            return 1
        if self.composition == "averaged":
            if self.label_top_k is not None and self.label_top_k != pool_size:
                raise DomainError(
                    f"averaged composition requires k = pool size ({pool_size}), got {self.label_top_k}"
                )
            return pool_size
        k = pool_size if self.label_top_k is None else int(self.label_top_k)
        if k > pool_size:
            raise DomainError(f"label_top_k = {k} exceeds the {pool_size} available negatives")
        return k

    @property
    def uses_cosine(self) -> bool:
        return self.composition == "cosine_contrastive"


@dataclass
class PerExampleLoss:
    """Loss value of one example with its gradient in score space.

    For :func:`bowl_loss`, :func:`softmax_ce_loss` and
    :func:`cosine_contrastive_loss` the gradient is indexed by label and
    ``active_negatives`` holds label ids. For :func:`snm_loss` the gradient is
    indexed by ``[positive, sampled negatives...]`` and ``active_negatives``
    holds positions inside the sampled set.
    """

    value: float
    score_gradient: np.ndarray
    active_negatives: np.ndarray


@dataclass
class BatchLoss:
    """Batched losses: row ``i`` has positive score column and a negative pool."""

    values: np.ndarray  # (n,)
    grad_pos: np.ndarray  # (n,)
    grad_neg: np.ndarray  # (n, m)
    active: np.ndarray  # (n, k) positions into the pool, stable rank order


def _rank_rows(matrix: np.ndarray, k: int) -> np.ndarray:
    # stable descending per row: lower pool position wins ties
    return np.argsort(-matrix, axis=1, kind="stable")[:, :k]


def batch_loss(pos_scores, neg_scores, spec: LossSpec) -> BatchLoss:
    """Evaluate ``spec`` on a batch.

    ``pos_scores`` has shape ``(n,)``; ``neg_scores`` has shape ``(n, m)`` and
    holds the negative pool of each row.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim != 2 or pos.shape != (neg.shape[0],):
        raise DomainError(f"shape mismatch: positives {pos.shape}, negatives {neg.shape}")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DomainError("scores must be finite")
    n, m = neg.shape
    k = spec.resolve_k(m)
    rows = np.arange(n)[:, None]
    grad_neg = np.zeros_like(neg)

    if spec.composition == "softmax_ce":
        active = _rank_rows(neg, k)
        pool = np.concatenate([pos[:, None], neg[rows, active]], axis=1)
        shift = np.max(pool, axis=1, keepdims=True)
        expd = np.exp(pool - shift)
        denom = np.sum(expd, axis=1, keepdims=True)
        values = (np.log(denom[:, 0]) + shift[:, 0]) - pos
        soft = expd / denom
        grad_pos = soft[:, 0] - 1.0
        grad_neg[rows, active] = soft[:, 1:]
        return BatchLoss(values, grad_pos, grad_neg, active)

    if spec.composition == "cosine_contrastive":
        pos_term = 1.0 - pos
        neg_terms = np.maximum(neg - spec.cosine_margin, 0.0)
        active = _rank_rows(neg_terms, k)
        values = pos_term + np.sum(neg_terms[rows, active], axis=1) / k
        grad_pos = np.full(n, -1.0)
        sel = neg[rows, active]
        grad_neg[rows, active] = np.where(sel > spec.cosine_margin, 1.0 / k, 0.0)
        return BatchLoss(values, grad_pos, grad_neg, active)

    phi = spec.base
    neg_terms = phi.value(-neg)
    active = _rank_rows(neg_terms, k)
    values = phi.value(pos) + np.sum(neg_terms[rows, active], axis=1) / k
    grad_pos = phi.derivative(pos)
    grad_neg[rows, active] = -phi.derivative(-neg[rows, active]) / k
    return BatchLoss(values, grad_pos, grad_neg, active)


def _complement(y: int, num_labels: int) -> np.ndarray:
    return np.concatenate([np.arange(y), np.arange(y + 1, num_labels)])


def _full_label_loss(y: int, scores, spec: LossSpec) -> PerExampleLoss:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise DomainError("need a score vector over at least two labels")
    if not 0 <= y < scores.size:
        raise DomainError(f"label {y} out of range for {scores.size} labels")
    negs = _complement(int(y), scores.size)
    out = batch_loss(scores[y:y + 1], scores[negs][None, :], spec)
    grad = np.zeros(scores.size)
    grad[y] = out.grad_pos[0]
    grad[negs] = out.grad_neg[0]
    return PerExampleLoss(float(out.values[0]), grad, negs[out.active[0]])


def bowl_loss(y: int, scores, spec: LossSpec) -> PerExampleLoss:
    """BOWL loss ``phi(f_y) + avg_top(k)({phi(-f_y')}_{y' != y})`` over all labels."""
    if spec.composition not in ("bowl", "crammer_singer", "averaged"):
        raise DomainError(f"bowl_loss needs a BOWL-family composition, got {spec.composition!r}")
    return _full_label_loss(y, scores, spec)


def snm_loss(y: int, score_pos: float, sampled_negative_scores, spec: LossSpec) -> PerExampleLoss:
    """Per-example loss restricted to a sampled negative pool.

    The gradient has length ``1 + len(sampled_negative_scores)``: entry 0 is
    the positive, entry ``1 + j`` the j-th sampled negative.
    """
    neg = np.asarray(sampled_negative_scores, dtype=np.float64)
    if neg.ndim != 1:
        raise DomainError("sampled negative scores must be a vector")
    out = batch_loss(np.array([score_pos], dtype=np.float64), neg[None, :], spec)
    grad = np.concatenate([out.grad_pos, out.grad_neg[0]])
    return PerExampleLoss(float(out.values[0]), grad, out.active[0].copy())


def softmax_ce_loss(y: int, scores) -> PerExampleLoss:
    """Softmax cross-entropy ``-f_y + log sum exp f`` with max-shifted log-sum-exp."""
    return _full_label_loss(y, scores, LossSpec("softmax_ce", label_top_k=None))


def cosine_contrastive_loss(y: int, embedding, label_vectors, margin: float = 0.5, k: int = 1) -> PerExampleLoss:
    """``(1 - cos(x, w_y)) + avg_top(k)([cos(x, w_y') - margin]_+)`` over ``y' != y``.

    Inputs must already be unit vectors. The gradient is taken with respect to
    the cosine scores.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    table = np.asarray(label_vectors, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != emb.size:
        raise DomainError(f"label vectors {table.shape} do not match embedding of size {emb.size}")
    if abs(np.linalg.norm(emb) - 1.0) > 1e-6 or np.any(np.abs(np.linalg.norm(table, axis=1) - 1.0) > 1e-6):
        raise DomainError("cosine contrastive loss expects unit-norm vectors")
    cos = table @ emb
    return _full_label_loss(y, cos, LossSpec("cosine_contrastive", label_top_k=k, cosine_margin=margin))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

KINK_GAP = 1e-3


@dataclass
class GradientCheckReport:
    max_rel_error: float
    checked: int
    skipped: int


def near_kink(y: int, scores: np.ndarray, spec: LossSpec) -> bool:
    negs = np.delete(scores, y)
    k = spec.resolve_k(negs.size)
    if spec.composition == "softmax_ce":
        terms = negs
    elif spec.composition == "cosine_contrastive":
        if np.any(np.abs(negs - spec.cosine_margin) < KINK_GAP):
            return True
        terms = np.maximum(negs - spec.cosine_margin, 0.0)
    else:
        phi = spec.base
        if phi.kink_distance(scores[y]) < KINK_GAP or np.any(phi.kink_distance(-negs) < KINK_GAP):
            return True
        terms = phi.value(-negs)
    if k < terms.size:
        ranked = np.sort(terms)[::-1]
        boundary_active = ranked[k - 1] > 0 or spec.composition == "softmax_ce"
        if boundary_active and ranked[k - 1] - ranked[k] < KINK_GAP:
            return True
    return False


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradient_at(spec: LossSpec, y: int, scores, h: float = 1e-6) -> Optional[float]:
    """Relative error of the analytic score gradient, or ``None`` near a kink."""
    scores = np.asarray(scores, dtype=np.float64)
    if near_kink(y, scores, spec):
        return None
    analytic = _full_label_loss(y, scores, spec).score_gradient
    numeric = finite_diff_gradient(lambda s: _full_label_loss(y, s, spec).value, scores, h)
    return relative_error(analytic, numeric)


def loss_gradient_check(spec: LossSpec, trials: int, seed: int, num_labels: int = 6,
                        scale: float = 2.0) -> GradientCheckReport:
    """Compare analytic and central-difference gradients at random score vectors."""
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = Rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(trials):
        y = rng.below(num_labels)
        if spec.uses_cosine:
            scores = np.tanh(rng.normal(num_labels))
        else:
            scores = scale * rng.normal(num_labels)
        err = check_gradient_at(spec, y, scores)
        if err is None:
            skipped += 1
            continue
        checked += 1
        worst = max(worst, err)
    return GradientCheckReport(worst, checked, skipped)
