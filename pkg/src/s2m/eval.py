"""Retrieval metrics: recall@r per tier and the worst subpopulation retrieval loss."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .core_math import DomainError
from .datagen import Dataset, TierSplit
from .losses import LossSpec, batch_loss
from .model import Scorer

__all__ = [
    "RetrievalMetrics",
    "retrieval_ranks",
    "recall_at_r",
    "max_subpop_loss",
    "per_example_surrogate",
    "head_tail_tiers",
    "frequency_tiers",
    "write_metrics_csv",
]

FULL = "full"


def retrieval_ranks(scores: np.ndarray, labels) -> np.ndarray:
    """0-based position of each true label in the stable descending order of its row.

    A label ties-ahead of equal scores at higher indices, so ``y`` is in
    ``top_r`` exactly when its rank is below ``r``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sy = scores[np.arange(labels.size), labels][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > sy) | ((scores == sy) & (cols < labels[:, None]))
    return ahead.sum(axis=1)


def _ranks_for(scorer: Scorer, dataset: Dataset, chunk: int = 4096) -> np.ndarray:
    out = np.empty(dataset.N, dtype=np.int64)
    for start in range(0, dataset.N, chunk):
        stop = min(start + chunk, dataset.N)
        s = scorer.score_batch(dataset.features[start:stop])
        out[start:stop] = retrieval_ranks(s, dataset.labels[start:stop])
    return out


def head_tail_tiers(dataset: Dataset, head_classes) -> np.ndarray:
    head = np.isin(dataset.labels, np.asarray(list(head_classes), dtype=np.int64))
    return np.where(head, "head", "tail")


def frequency_tiers(dataset: Dataset, split: TierSplit) -> np.ndarray:
    return np.array([split.tier_of(y) for y in dataset.labels.tolist()], dtype=object)


@dataclass
class RetrievalMetrics:
    r_values: tuple
    recall: Dict[str, Dict[int, Optional[float]]]
    n_pairs: Dict[str, int]
    subpop_loss: Optional[np.ndarray] = None
    max_subpop_retrieval_loss: Optional[Dict[int, tuple]] = None
    warnings: list = field(default_factory=list)

    def csv_rows(self, method: str = "", example_top_k: Optional[int] = None):
        for tier, by_r in self.recall.items():
            if self.n_pairs[tier] == 0:
                continue
            for r in self.r_values:
                yield [method, "" if example_top_k is None else example_top_k, r, tier,
                       repr(by_r[r]), self.n_pairs[tier]]


def recall_at_r(scorer: Scorer, dataset: Dataset, r_values: Sequence[int],
                tiers: Optional[Sequence[str]] = None, tier_names: Sequence[str] = (),
                spec: Optional[LossSpec] = None) -> RetrievalMetrics:
    """Fraction of pairs whose label is in ``top_r`` of the scores, per tier and overall.

    ``tiers`` gives each example's tier name; ``tier_names`` lists tiers to
    report even if they end up empty (reported as ``None``, not 0). When the
    dataset carries subpopulation ids the per-subpopulation surrogate loss
    (if ``spec`` is given) and the worst subpopulation retrieval loss are added.
    """
    r_values = tuple(int(r) for r in r_values)
    K = dataset.num_labels
    if any(not 1 <= r <= K for r in r_values):
        raise DomainError(f"every r must lie in [1, {K}]")
    ranks = _ranks_for(scorer, dataset)
    groups: Dict[str, np.ndarray] = {FULL: np.ones(dataset.N, dtype=bool)}
    if tiers is not None:
        tiers = np.asarray(tiers, dtype=object)
        if tiers.size != dataset.N:
            raise DomainError("need one tier per example")
        for name in list(tier_names) + sorted(set(tiers.tolist()) - set(tier_names)):
            groups[name] = tiers == name
    recall: Dict[str, Dict[int, Optional[float]]] = {}
    n_pairs: Dict[str, int] = {}
    notes = []
    for name, mask in groups.items():
        n = int(mask.sum())
        n_pairs[name] = n
        if n == 0:
            notes.append(f"tier {name!r} has no test pairs")
            warnings.warn(notes[-1])
            recall[name] = {r: None for r in r_values}
            continue
        rk = ranks[mask]
        recall[name] = {r: float(np.count_nonzero(rk < r)) / n for r in r_values}
    metrics = RetrievalMetrics(r_values, recall, n_pairs, warnings=notes)
    if dataset.subpop_ids is not None and np.all(np.bincount(dataset.subpop_ids, minlength=dataset.num_subpops) > 0):
        metrics.max_subpop_retrieval_loss = {
            r: _max_subpop_from_ranks(ranks, dataset, r)[:2] for r in r_values
        }
        if spec is not None:
            losses = per_example_surrogate(scorer, dataset, spec)
            metrics.subpop_loss = np.bincount(dataset.subpop_ids, weights=losses,
                                              minlength=dataset.num_subpops) / np.bincount(
                dataset.subpop_ids, minlength=dataset.num_subpops)
    return metrics


def _max_subpop_from_ranks(ranks: np.ndarray, dataset: Dataset, r: int):
    sizes = np.bincount(dataset.subpop_ids, minlength=dataset.num_subpops)
    if np.any(sizes == 0):
        raise DomainError("every subpopulation must be non-empty")
    misses = np.bincount(dataset.subpop_ids, weights=(ranks >= r).astype(np.float64),
                         minlength=dataset.num_subpops)
    per = misses / sizes
    p = int(np.argmax(per))
    return float(per[p]), p, per


def max_subpop_loss(scorer: Scorer, dataset: Dataset, r: int):
    """Worst per-subpopulation retrieval loss: ``(value, argmax p, per-subpop losses)``."""
    if dataset.subpop_ids is None:
        raise DomainError("dataset has no subpopulation ids")
    if not 1 <= r <= dataset.num_labels:
        raise DomainError(f"r must lie in [1, {dataset.num_labels}]")
    return _max_subpop_from_ranks(_ranks_for(scorer, dataset), dataset, r)


def per_example_surrogate(scorer: Scorer, dataset: Dataset, spec: LossSpec) -> np.ndarray:
    """Full-label surrogate loss of every example."""
    K = dataset.num_labels
    base = np.arange(K - 1)
    negs = base[None, :] + (base[None, :] >= dataset.labels[:, None])
    L = np.concatenate([dataset.labels[:, None], negs], axis=1)
    S = scorer.score_subset_batch(dataset.features, L, normalize=spec.uses_cosine)
    return batch_loss(S[:, 0], S[:, 1:], spec).values


def write_metrics_csv(rows_by_run: Mapping, path) -> None:
    """``rows_by_run`` maps ``(method, k')`` to :class:`RetrievalMetrics`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "k_prime", "r", "tier", "recall", "n_pairs"])
        for (method, kp), metrics in rows_by_run.items():
            for row in metrics.csv_rows(method, kp):
                w.writerow(row)
