"""Synthetic heterogeneous mixtures, head/tail downsampling, frequency tiers, dataset IO.

A mixture draws a subpopulation ``p ~ nu``, then a class uniformly from that
subpopulation's label set, then a feature vector ``mean[class] + noise * N(0, I)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .core_math import DomainError, Rng, derive_seed

__all__ = [
    "MixtureSpec",
    "Dataset",
    "TierSplit",
    "DatasetFormatError",
    "EmptyTailWarning",
    "make_mixture_spec",
    "generate_mixture",
    "downsample_tail",
    "frequency_split",
    "empirical_quantile",
    "read_dataset",
    "write_dataset",
    "read_config",
]


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class EmptyTailWarning(UserWarning):
    """Downsampling removed every example of some tail class."""


@dataclass
class MixtureSpec:
    weights: np.ndarray  # nu, length P
    class_means: np.ndarray  # (K, d)
    labels_per_subpop: list  # P label sequences
    noise_scale: float = 1.0
    seed: int = 0
    disjoint: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.class_means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        self.labels_per_subpop = [np.asarray(ls, dtype=np.int64) for ls in self.labels_per_subpop]
        if self.weights.ndim != 1 or self.weights.size != len(self.labels_per_subpop):
            raise DomainError("need one mixture weight per subpopulation")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DomainError(f"mixture weights must be positive and sum to 1, got {self.weights}")
        if self.noise_scale < 0:
            raise DomainError("noise scale must be non-negative")
        K = self.class_means.shape[0]
        seen: set = set()
        for ls in self.labels_per_subpop:
            if ls.size == 0:
                raise DomainError("every subpopulation needs at least one label")
            if ls.min() < 0 or ls.max() >= K:
                raise DomainError(f"labels must lie in [0, {K})")
            if self.disjoint and seen.intersection(ls.tolist()):
                raise DomainError("label sets overlap; pass disjoint=False for overlapping support")
            seen.update(ls.tolist())

    @property
    def num_subpops(self) -> int:
        return self.weights.size

    @property
    def num_labels(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


def make_mixture_spec(labels_per_subpop: Sequence[Sequence[int]], dim: int, weights=None,
                      separation: float = 3.0, noise_scale: float = 1.0, seed: int = 0,
                      disjoint: bool = True) -> MixtureSpec:
    """Mixture with class means drawn as ``separation * N(0, I) / sqrt(dim)``."""
    P = len(labels_per_subpop)
    K = 1 + max(int(max(ls)) for ls in labels_per_subpop)
    if weights is None:
        weights = np.full(P, 1.0 / P)
    rng = Rng(derive_seed(seed, "class_means"))
    means = separation * rng.normal((K, dim)) / math.sqrt(dim)
    return MixtureSpec(np.asarray(weights, dtype=np.float64), means, list(labels_per_subpop),
                       noise_scale, seed, disjoint)


@dataclass
class Dataset:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    num_labels: int
    subpop_ids: Optional[np.ndarray] = None
    num_subpops: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.features.shape[0] != self.labels.size:
            raise DomainError("features and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise DomainError(f"labels must lie in [0, {self.num_labels})")
        if self.subpop_ids is not None:
            self.subpop_ids = np.asarray(self.subpop_ids, dtype=np.int64)
            if self.subpop_ids.shape != self.labels.shape:
                raise DomainError("subpop_ids must have one entry per example")
            if self.subpop_ids.size and (self.subpop_ids.min() < 0 or self.subpop_ids.max() >= self.num_subpops):
                raise DomainError(f"subpop ids must lie in [0, {self.num_subpops})")

    @property
    def N(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        sp = None if self.subpop_ids is None else self.subpop_ids[idx]
        return Dataset(self.features[idx], self.labels[idx], self.num_labels, sp, self.num_subpops)

    def equals(self, other: "Dataset") -> bool:
        same_sp = (self.subpop_ids is None and other.subpop_ids is None) or (
            self.subpop_ids is not None and other.subpop_ids is not None
            and np.array_equal(self.subpop_ids, other.subpop_ids)
        )
        return (self.num_labels == other.num_labels and self.num_subpops == other.num_subpops
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features) and same_sp)


def generate_mixture(spec: MixtureSpec, N: int, seed: Optional[int] = None) -> Dataset:
    """Draw ``N`` examples; ``seed`` defaults to ``spec.seed``."""
    if N < 0:
        raise DomainError("N must be non-negative")
    rng = Rng(derive_seed(spec.seed if seed is None else seed, "examples"))
    cdf = np.cumsum(spec.weights)
    cdf[-1] = 1.0
    sub = np.searchsorted(cdf, rng.random(N), side="right")
    pick = rng.random(N)
    labels = np.empty(N, dtype=np.int64)
    for p, ls in enumerate(spec.labels_per_subpop):
        mask = sub == p
        labels[mask] = ls[np.minimum((pick[mask] * ls.size).astype(np.int64), ls.size - 1)]
    noise = rng.normal((N, spec.dim))
    features = spec.class_means[labels] + spec.noise_scale * noise
    return Dataset(features, labels, spec.num_labels, sub, spec.num_subpops)


def downsample_tail(dataset: Dataset, head_classes, ratio: float, seed: int) -> Dataset:
    """Keep every head example and each tail example with probability ``1/ratio``.

    Example order is preserved. Feature values are never modified.
    """
    if not (ratio >= 1 and math.isfinite(ratio)):
        raise DomainError(f"ratio must be finite and >= 1, got {ratio!r}")
    head = np.unique(np.asarray(list(head_classes), dtype=np.int64))
    present = np.unique(dataset.labels)
    tail = np.setdiff1d(present, head)
    if head.size == 0 or tail.size == 0:
        raise DomainError("both head and tail class sets must be non-empty")
    rng = Rng(derive_seed(seed, "downsample"))
    u = rng.random(dataset.N)
    is_head = np.isin(dataset.labels, head)
    keep = is_head | (u < 1.0 / ratio)
    out = dataset.subset(np.nonzero(keep)[0])
    emptied = np.setdiff1d(tail, np.unique(out.labels))
    if emptied.size:
        warnings.warn(f"tail classes {emptied.tolist()} lost every training example", EmptyTailWarning)
    return out


def empirical_quantile(values, q: float) -> float:
    """Value at index ``ceil(q * M) - 1`` of the ascending sort (clamped to [0, M-1])."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise DomainError("quantile of an empty list")
    idx = min(max(math.ceil(q * arr.size) - 1, 0), arr.size - 1)
    return float(arr[idx])


TIERS = ("head", "torso", "tail")


@dataclass
class TierSplit:
    tiers: Dict[int, str]
    frequencies: Dict[int, float]
    q_head: float
    q_tail: float
    degenerate: bool = False

    def tier_of(self, label: int) -> str:
        # labels never seen in training have frequency 0 and fall in the tail
        return self.tiers.get(int(label), "tail")

    def labels_in(self, tier: str) -> list:
        return sorted(lab for lab, t in self.tiers.items() if t == tier)


def frequency_split(train_labels, quantiles=(0.33, 0.66)) -> TierSplit:
    """Head/torso/tail split of the labels seen in training by frequency.

    With ``q`` the upper and ``q'`` the lower quantile of the per-label training
    frequencies: head if ``pi > q``, torso if ``q >= pi > q'``, tail otherwise.
    ``degenerate`` is set when fewer than two tiers are populated.
    """
    labels = np.asarray(train_labels, dtype=np.int64)
    if labels.size == 0:
        raise DomainError("no training labels")
    lo, hi = sorted(quantiles)
    uniq, counts = np.unique(labels, return_counts=True)
    freq = counts / labels.size
    q_tail = empirical_quantile(freq, lo)
    q_head = empirical_quantile(freq, hi)
    tiers = {}
    for lab, pi in zip(uniq.tolist(), freq.tolist()):
        if pi > q_head:
            tiers[lab] = "head"
        elif pi > q_tail:
            tiers[lab] = "torso"
        else:
            tiers[lab] = "tail"
    degenerate = len(set(tiers.values())) < 2
    return TierSplit(tiers, dict(zip(uniq.tolist(), freq.tolist())), q_head, q_tail, degenerate)


# ---------------------------------------------------------------------------
# text IO
# ---------------------------------------------------------------------------
#
# header:  N K d P
# body:    one line per example: label subpop_id x_1 ... x_d   (subpop_id = -1 if absent)
# floats are written with repr(), which round-trips float64 exactly.


def write_dataset(dataset: Dataset, path) -> None:
    P = dataset.num_subpops if dataset.subpop_ids is not None else 0
    lines = [f"{dataset.N} {dataset.num_labels} {dataset.dim} {P}"]
    sub = dataset.subpop_ids
    for i in range(dataset.N):
        sp = -1 if sub is None else int(sub[i])
        feats = " ".join(repr(float(v)) for v in dataset.features[i])
        lines.append(f"{int(dataset.labels[i])} {sp} {feats}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    try:
        N, K, d, P = (int(t) for t in text[0].split())
    except ValueError:
        raise DatasetFormatError(f"{path}: line 1: header must be 'N K d P', found {text[0]!r}") from None
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != N:
        raise DatasetFormatError(f"{path}: header declares N={N} examples, found {len(body)}")
    feats = np.empty((N, d))
    labels = np.empty(N, dtype=np.int64)
    subs = np.empty(N, dtype=np.int64)
    for i, ln in enumerate(body):
        lineno = i + 2
        toks = ln.split()
        if len(toks) != d + 2:
            raise DatasetFormatError(f"{path}: line {lineno}: expected {d + 2} fields, found {len(toks)}")
        try:
            labels[i] = int(toks[0])
            subs[i] = int(toks[1])
            feats[i] = [float(t) for t in toks[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if not 0 <= labels[i] < K:
            raise DatasetFormatError(f"{path}: line {lineno}: label {labels[i]} outside [0, {K})")
        if P == 0 and subs[i] != -1 or P > 0 and not 0 <= subs[i] < P:
            raise DatasetFormatError(f"{path}: line {lineno}: subpop id {subs[i]} invalid for P={P}")
    return Dataset(feats, labels, K, subs if P > 0 else None, P)


def read_config(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; duplicate keys are an error."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise DomainError(f"{path}: line {lineno}: expected key=value, found {raw!r}")
        if key in out:
            raise DomainError(f"{path}: line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out
