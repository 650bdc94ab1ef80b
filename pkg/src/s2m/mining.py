"""Doubly-stochastic mining: hardest labels per example, hardest examples per minibatch.

One training step:

1. draw a minibatch of ``N_mb`` distinct examples;
2. for each example draw ``K_bar`` distinct negative labels (or use all of them);
3. compute the per-example loss over the ``k`` hardest sampled negatives;
4. average the ``k'`` largest per-example losses and take a gradient step.

SGD, stochastic negative mining (SNM) and average top-k' SGD (q-SGD) are the
special cases ``(K_bar = all, k' = N_mb)``, ``(K_bar < all, k' = N_mb)`` and
``(K_bar = all, k' < N_mb)``; :func:`method_config` validates those presets.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .core_math import (
    ComparisonCounter,
    DomainError,
    OwaWeights,
    Rng,
    derive_seed,
    sample_without_replacement,
    select_top,
)
from .datagen import Dataset
from .losses import LossSpec, batch_loss
from .model import Scorer

__all__ = [
    "MiningConfig",
    "MinibatchLoss",
    "TraceRow",
    "TrainResult",
    "TrainingDiverged",
    "MethodConfigError",
    "METHODS",
    "method_config",
    "sample_minibatch",
    "sample_negatives",
    "label_sets",
    "minibatch_top_k",
    "s2m_minibatch_loss",
    "train",
    "write_trace_csv",
    "read_trace_csv",
    "ExpectedLoss",
    "expected_loss_oracle",
]

METHODS = ("sgd", "snm", "qsgd", "s2m")


class MethodConfigError(DomainError):
    """A training method's preset rule is violated by the configuration."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite minibatch loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class MiningConfig:
    """Sampling and mining knobs.

    ``label_sample_size=None`` means every negative label is used (no label
    sampling). The number of hardest labels ``k`` lives in :class:`LossSpec`.
    """

    minibatch_size: int
    example_top_k: int
    label_sample_size: Optional[int] = None
    steps: int = 100
    learning_rate: float = 0.1
    seed: int = 0
    shared_negatives: bool = False

    def __post_init__(self):
        if self.minibatch_size < 1 or self.example_top_k < 1 or self.steps < 0:
            raise DomainError("minibatch_size and example_top_k must be positive, steps non-negative")
        if self.example_top_k > self.minibatch_size:
            raise DomainError(f"k' = {self.example_top_k} exceeds N_mb = {self.minibatch_size}")
        if self.label_sample_size is not None and self.label_sample_size < 1:
            raise DomainError("label_sample_size must be positive or None")
        if not self.learning_rate >= 0:
            raise DomainError("learning rate must be non-negative")

    def resolved(self, num_examples: int, num_labels: int) -> "MiningConfig":
        """Check against a dataset and map ``K_bar = K - 1`` to "all"."""
        if self.minibatch_size > num_examples:
            raise DomainError(f"N_mb = {self.minibatch_size} exceeds N = {num_examples}")
        kb = self.label_sample_size
        if kb is not None:
            if kb > num_labels - 1:
                raise DomainError(f"K_bar = {kb} exceeds the {num_labels - 1} negative labels")
            if kb == num_labels - 1:
                return replace(self, label_sample_size=None)
        return self

    @property
    def samples_labels(self) -> bool:
        return self.label_sample_size is not None


def method_config(method: str, cfg: MiningConfig, num_labels: int) -> MiningConfig:
    """Validate that ``cfg`` is an instance of ``method`` and return it resolved."""
    if method not in METHODS:
        raise MethodConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    kb = cfg.label_sample_size
    all_labels = kb is None or kb == num_labels - 1
    full_batch = cfg.example_top_k == cfg.minibatch_size
    if method == "sgd" and not (all_labels and full_batch):
        raise MethodConfigError("sgd requires K_bar = all labels and k' = N_mb")
    if method == "snm" and not (full_batch and not all_labels):
        raise MethodConfigError("snm requires K_bar < K - 1 and k' = N_mb")
    if method == "qsgd" and not (all_labels and not full_batch):
        raise MethodConfigError("qsgd requires K_bar = all labels and k' < N_mb")
    return cfg if kb is None or not all_labels else replace(cfg, label_sample_size=None)


def sample_minibatch(dataset: Dataset, cfg: MiningConfig, rng: Rng) -> np.ndarray:
    """``N_mb`` distinct example indices, uniform without replacement."""
    if cfg.minibatch_size > dataset.N:
        raise DomainError(f"N_mb = {cfg.minibatch_size} exceeds N = {dataset.N}")
    return sample_without_replacement(dataset.N, cfg.minibatch_size, rng)


def sample_negatives(y: int, num_labels: int, sample_size: int, rng: Rng) -> np.ndarray:
    """``sample_size`` distinct labels from ``[K] - {y}``, uniform without replacement."""
    if not 0 <= y < num_labels:
        raise DomainError(f"label {y} outside [0, {num_labels})")
    if sample_size > num_labels - 1:
        raise DomainError(f"K_bar = {sample_size} exceeds the {num_labels - 1} negative labels")
    draw = sample_without_replacement(num_labels - 1, sample_size, rng)
    return draw + (draw >= y)


def label_sets(labels, num_labels: int, cfg: MiningConfig, rng: Optional[Rng]) -> np.ndarray:
    """Matrix whose row ``i`` is ``[y_i, negatives...]`` for the batch labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if not cfg.samples_labels:
        base = np.arange(num_labels - 1)
        negs = base[None, :] + (base[None, :] >= labels[:, None])
        return np.concatenate([labels[:, None], negs], axis=1)
    kb = cfg.label_sample_size
    out = np.empty((n, 1 + kb), dtype=np.int64)
    out[:, 0] = labels
    if cfg.shared_negatives:
        pool = sample_without_replacement(num_labels, kb + 1, rng)
        for i, y in enumerate(labels):
            hit = np.nonzero(pool == y)[0]
            out[i, 1:] = np.delete(pool, hit[0] if hit.size else kb)
        return out
    if 4 * kb >= num_labels - 1:
        # dense regime: one uniform key per candidate, keep the kb smallest keys.
        # O(K) per example, which is O(K_bar) here, and vectorised over the batch
        keys = rng.random((n, num_labels - 1))
        draw = np.argsort(keys, axis=1, kind="stable")[:, :kb]
        out[:, 1:] = draw + (draw >= labels[:, None])
        return out
    for i, y in enumerate(labels):
        out[i, 1:] = sample_negatives(int(y), num_labels, kb, rng)
    return out


def minibatch_top_k(values, k: int, counter: Optional[ComparisonCounter] = None):
    """``(avg_top(values, k), selected positions)`` with the stable tie rule."""
    sel = select_top(values, k, counter=counter)
    return float(np.sum(sel.values) / k), sel.indices


@dataclass
class MinibatchLoss:
    value: float
    selected_examples: np.ndarray  # positions within the batch, rank order
    per_example: np.ndarray
    batch: np.ndarray
    label_sets: np.ndarray
    score_grads: np.ndarray
    active_negatives: np.ndarray

    @property
    def selected_dataset_indices(self) -> np.ndarray:
        return self.batch[self.selected_examples]


def s2m_minibatch_loss(scorer: Scorer, dataset: Dataset, batch, cfg: MiningConfig,
                       spec: LossSpec, rng: Optional[Rng],
                       counter: Optional[ComparisonCounter] = None) -> MinibatchLoss:
    """Top-k' average of per-example sampled-negative losses.

    ``score_grads[i, j]`` is the derivative of the minibatch loss with respect
    to the score of label ``label_sets[i, j]`` on example ``batch[i]``; rows of
    unselected examples are zero.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size != cfg.minibatch_size:
        raise DomainError(f"batch has {batch.size} examples, expected N_mb = {cfg.minibatch_size}")
    L = label_sets(dataset.labels[batch], dataset.num_labels, cfg, rng)
    S = scorer.score_subset_batch(dataset.features[batch], L, normalize=spec.uses_cosine)
    out = batch_loss(S[:, 0], S[:, 1:], spec)
    kp = cfg.example_top_k
    value, sel = minibatch_top_k(out.values, kp, counter)
    G = np.zeros_like(S)
    G[sel, 0] = out.grad_pos[sel] / kp
    G[sel, 1:] = out.grad_neg[sel] / kp
    return MinibatchLoss(value, sel, out.values, batch, L, G, out.active)


@dataclass
class TraceRow:
    step: int
    loss: float
    selected: np.ndarray  # dataset indices


@dataclass
class TrainResult:
    scorer: Scorer
    trace: List[TraceRow] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


def train(dataset: Dataset, cfg: MiningConfig, spec: LossSpec, scorer: Scorer,
          method: str = "s2m") -> TrainResult:
    """Run ``cfg.steps`` plain gradient steps on the minibatch loss.

    The input scorer is not modified. Minibatches and negatives come from two
    streams derived from ``cfg.seed``, so turning label sampling on or off never
    changes which minibatches are drawn.
    """
    if scorer.num_labels != dataset.num_labels or scorer.input_dim != dataset.dim:
        raise DomainError(
            f"scorer (d={scorer.input_dim}, K={scorer.num_labels}) does not match "
            f"dataset (d={dataset.dim}, K={dataset.num_labels})"
        )
    cfg = method_config(method, cfg.resolved(dataset.N, dataset.num_labels), dataset.num_labels)
    spec.resolve_k(cfg.label_sample_size or dataset.num_labels - 1)
    model = scorer.copy()
    batch_rng = Rng(derive_seed(cfg.seed, "minibatch"))
    label_rng = Rng(derive_seed(cfg.seed, "negatives"))
    result = TrainResult(model)
    for step in range(cfg.steps):
        batch = sample_minibatch(dataset, cfg, batch_rng)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                mb = s2m_minibatch_loss(model, dataset, batch, cfg, spec, label_rng)
        except DomainError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        if not math.isfinite(mb.value):
            raise TrainingDiverged(step)
        result.trace.append(TraceRow(step, mb.value, mb.selected_dataset_indices.copy()))
        if cfg.learning_rate > 0:
            grad = model.gradient(dataset.features[batch], mb.label_sets, mb.score_grads,
                                  normalize=spec.uses_cosine)
            try:
                model.apply(grad, cfg.learning_rate)
            except FloatingPointError:
                raise TrainingDiverged(step, "non-finite parameters") from None
        model.step += 1
    return result


def write_trace_csv(trace: List[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "selected_indices"])
        for row in trace:
            w.writerow([row.step, repr(float(row.loss)), ";".join(str(int(i)) for i in row.selected)])


def read_trace_csv(path) -> List[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            sel = rec["selected_indices"]
            idx = np.array([int(t) for t in sel.split(";")] if sel else [], dtype=np.int64)
            rows.append(TraceRow(int(rec["step"]), float(rec["loss"]), idx))
    return rows


# ---------------------------------------------------------------------------
# expected top-k' loss by enumeration
# ---------------------------------------------------------------------------


@dataclass
class ExpectedLoss:
    value: float
    theta: OwaWeights
    num_batches: int


def expected_loss_oracle(losses_full, minibatch_size: int, k: int,
                         max_batches: int = 10 ** 6) -> ExpectedLoss:
    """Exact expectation of the top-k' minibatch loss over all minibatches.

    Alongside the expectation, the rank weights ``theta`` are recovered: each
    minibatch puts ``1/k'`` on the full-sample ranks of its ``k'`` selected
    members, and ``theta`` is the average over minibatches.
    """
    u = np.asarray(losses_full, dtype=np.float64)
    N = u.size
    if not 1 <= k <= minibatch_size <= N:
        raise DomainError("need 1 <= k' <= N_mb <= N")
    total = math.comb(N, minibatch_size)
    if total > max_batches:
        raise DomainError(f"C({N}, {minibatch_size}) = {total} minibatches is too many to enumerate; "
                          "use Monte-Carlo sampling instead")
    order = np.argsort(-u, kind="stable")
    rank = np.empty(N, dtype=np.int64)
    rank[order] = np.arange(N)
    theta = np.zeros(N)
    acc = 0.0
    for combo in itertools.combinations(range(N), minibatch_size):
        idx = np.asarray(combo)
        value, sel = minibatch_top_k(u[idx], k)
        acc += value
        theta[rank[idx[sel]]] += 1.0 / k
    theta /= total
    return ExpectedLoss(acc / total, OwaWeights(theta), total)
