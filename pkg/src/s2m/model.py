"""Scorers ``f: R^d -> R^K`` with sparse label updates and checkpoint IO.

Two scorers are provided. The linear scorer computes ``W x`` with ``W`` of
shape ``(K, d)``. The embedding scorer computes ``T (A x)`` with a projection
``A`` of shape ``(hidden, d)`` and a label table ``T`` of shape
``(K, hidden)``; the hidden layer is linear, so the model is a rank-limited
factorisation of a linear scorer.

Scores for a subset of labels cost ``|labels| * width`` multiplies, and a
gradient step only writes the label rows that carry non-zero gradient. Both
facts are tracked by :attr:`Scorer.mult_count`.

With ``normalize=True`` scores are cosines between the embedding and the
label rows; parameters themselves are never renormalised.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core_math import DomainError, Rng

__all__ = [
    "Scorer",
    "ParamGrad",
    "CheckpointError",
    "score",
    "score_subset",
    "apply_gradient",
    "save_checkpoint",
    "load_checkpoint",
]


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class ParamGrad:
    """Sparse parameter gradient: rows of the label table plus optional projection."""

    rows: np.ndarray
    row_grads: np.ndarray
    projection: Optional[np.ndarray] = None


class Scorer:
    def __init__(self, kind: str, weights: np.ndarray, projection: Optional[np.ndarray] = None,
                 seed: int = 0, step: int = 0):
        if kind not in ("linear", "embedding"):
            raise DomainError(f"unknown scorer kind {kind!r}")
        weights = np.array(weights, dtype=np.float64)
        if weights.ndim != 2:
            raise DomainError("label weights must be a matrix")
        if kind == "embedding":
            if projection is None:
                raise DomainError("embedding scorer needs a projection matrix")
            projection = np.array(projection, dtype=np.float64)
            if projection.ndim != 2 or projection.shape[0] != weights.shape[1]:
                raise DomainError(f"projection {projection.shape} does not match label table {weights.shape}")
        elif projection is not None:
            raise DomainError("linear scorer takes no projection")
        for arr in (weights, projection):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DomainError("parameters must be finite")
        self.kind = kind
        self.weights = weights
        self.projection = projection
        self.seed = int(seed)
        self.step = int(step)
        self.mult_count = 0

    # -- construction -------------------------------------------------------

    @classmethod
    def linear(cls, input_dim: int, num_labels: int, seed: int = 0) -> "Scorer":
        """Weights uniform in ``[-1/sqrt(d), 1/sqrt(d)]``."""
        rng = Rng(seed)
        bound = 1.0 / np.sqrt(input_dim)
        w = (2.0 * rng.random((num_labels, input_dim)) - 1.0) * bound
        return cls("linear", w, seed=seed)

    @classmethod
    def embedding(cls, input_dim: int, num_labels: int, hidden_dim: int, seed: int = 0) -> "Scorer":
        """Projection uniform in ``±1/sqrt(d)``, label table uniform in ``±1/sqrt(hidden)``."""
        rng = Rng(seed)
        proj = (2.0 * rng.random((hidden_dim, input_dim)) - 1.0) / np.sqrt(input_dim)
        table = (2.0 * rng.random((num_labels, hidden_dim)) - 1.0) / np.sqrt(hidden_dim)
        return cls("embedding", table, proj, seed=seed)

    def copy(self) -> "Scorer":
        proj = None if self.projection is None else self.projection.copy()
        return Scorer(self.kind, self.weights.copy(), proj, self.seed, self.step)

    # -- shape --------------------------------------------------------------

    @property
    def num_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.width if self.projection is None else self.projection.shape[1]

    @property
    def hidden_dim(self) -> int:
        return 0 if self.projection is None else self.projection.shape[0]

    def parameters_equal(self, other: "Scorer") -> bool:
        same_proj = (self.projection is None and other.projection is None) or (
            self.projection is not None and other.projection is not None
            and np.array_equal(self.projection, other.projection)
        )
        return self.kind == other.kind and np.array_equal(self.weights, other.weights) and same_proj

    # -- forward --------------------------------------------------------------

    def _check_features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DomainError(f"features of shape {X.shape} do not match input dim {self.input_dim}")
        return X

    def embed(self, X) -> np.ndarray:
        """Hidden representation: ``X`` itself (linear) or ``X A^T`` (embedding)."""
        X = self._check_features(X)
        if self.projection is None:
            return X
        self.mult_count += X.shape[0] * self.projection.size
        return X @ self.projection.T

    def score_batch(self, X) -> np.ndarray:
        """Scores of every label, shape ``(n, K)``."""
        H = self.embed(X)
        self.mult_count += H.shape[0] * self.weights.size
        return H @ self.weights.T

    def score_subset_batch(self, X, labels, normalize: bool = False) -> np.ndarray:
        """Scores ``s[i, j] = f_{labels[i, j]}(x_i)``, shape of ``labels``."""
        labels = np.asarray(labels, dtype=np.int64)
        H = self.embed(X)
        if labels.ndim != 2 or labels.shape[0] != H.shape[0]:
            raise DomainError(f"label matrix {labels.shape} does not match {H.shape[0]} examples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_labels):
            raise DomainError("label index out of range")
        rows = self.weights[labels]  # (n, m, width)
        self.mult_count += labels.size * self.width
        raw = np.einsum("nmw,nw->nm", rows, H)
        if not normalize:
            return raw
        self.mult_count += labels.size * self.width + H.size
        row_norm = np.linalg.norm(rows, axis=2)
        h_norm = np.linalg.norm(H, axis=1)
        return raw / (row_norm * h_norm[:, None])

    # -- backward -------------------------------------------------------------

    def gradient(self, X, labels, score_grads, normalize: bool = False) -> ParamGrad:
        """Chain rule from score-space gradients to parameters.

        Only label rows whose score gradient is non-zero are included.
        """
        X = self._check_features(X)
        labels = np.asarray(labels, dtype=np.int64)
        G = np.asarray(score_grads, dtype=np.float64)
        if G.shape != labels.shape:
            raise DomainError(f"gradient shape {G.shape} does not match labels {labels.shape}")
        if not np.all(np.isfinite(G)):
            raise DomainError("non-finite score gradient")
        H = self.embed(X)
        ex, pos = np.nonzero(G)
        lab = labels[ex, pos]
        g = G[ex, pos]
        h = H[ex]
        w = self.weights[lab]
        if normalize:
            w_norm = np.linalg.norm(w, axis=1)
            h_norm = np.linalg.norm(h, axis=1)
            cos = np.einsum("iw,iw->i", w, h) / (w_norm * h_norm)
            self.mult_count += 3 * lab.size * self.width
            # d cos / d w = (h/|h| - cos w/|w|) / |w| ; symmetric for h
            d_w = (h / h_norm[:, None] - cos[:, None] * w / w_norm[:, None]) / w_norm[:, None]
            d_h = (w / w_norm[:, None] - cos[:, None] * h / h_norm[:, None]) / h_norm[:, None]
        else:
            d_w, d_h = h, w
        rows, inverse = np.unique(lab, return_inverse=True)
        row_grads = np.zeros((rows.size, self.width))
        np.add.at(row_grads, inverse, g[:, None] * d_w)
        self.mult_count += lab.size * self.width
        proj_grad = None
        if self.projection is not None:
            grad_h = np.zeros_like(H)
            np.add.at(grad_h, ex, g[:, None] * d_h)
            self.mult_count += lab.size * self.width + self.projection.size * X.shape[0]
            proj_grad = grad_h.T @ X
        return ParamGrad(rows, row_grads, proj_grad)

    def apply(self, grad: ParamGrad, lr: float) -> "Scorer":
        """In-place step ``theta -= lr * grad`` on the touched rows only."""
        with np.errstate(over="ignore", invalid="ignore"):
            if grad.rows.size:
                self.weights[grad.rows] -= lr * grad.row_grads
                self.mult_count += grad.row_grads.size
            if grad.projection is not None:
                self.projection -= lr * grad.projection
                self.mult_count += grad.projection.size
        if not np.all(np.isfinite(self.weights[grad.rows])) or (
            self.projection is not None and not np.all(np.isfinite(self.projection))
        ):
            raise FloatingPointError("parameters became non-finite")
        return self


def score(scorer: Scorer, x) -> np.ndarray:
    """Scores of all labels for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DomainError("expected a single feature vector")
    return scorer.score_batch(x[None, :])[0]


def score_subset(scorer: Scorer, x, labels) -> np.ndarray:
    """Scores of the requested labels only."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 1 or labels.ndim != 1:
        raise DomainError("expected a feature vector and a label vector")
    return scorer.score_subset_batch(x[None, :], labels[None, :])[0]


def apply_gradient(scorer: Scorer, labels, score_grads, features, lr: float,
                   normalize: bool = False) -> Scorer:
    """Gradient step from per-example score gradients.

    ``labels[i, j]`` names the label whose score received ``score_grads[i, j]``
    for example ``features[i]``. The scorer is updated in place and returned.
    """
    if lr == 0:
        return scorer
    grad = scorer.gradient(features, labels, score_grads, normalize=normalize)
    return scorer.apply(grad, lr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout: one ASCII header line terminated by '\n'
#   S2M-CHECKPOINT v1 kind=<linear|embedding> d=<int> K=<int> hidden=<int> seed=<int> step=<int>
# followed by the label table (K x width) and, for embedding scorers, the
# projection (hidden x d), both row-major little-endian float64. Nothing else.

MAGIC = "S2M-CHECKPOINT"
VERSION = "v1"
_HEADER_KEYS = ("kind", "d", "K", "hidden", "seed", "step")


def save_checkpoint(scorer: Scorer, path) -> None:
    header = (
        f"{MAGIC} {VERSION} kind={scorer.kind} d={scorer.input_dim} K={scorer.num_labels} "
        f"hidden={scorer.hidden_dim} seed={scorer.seed} step={scorer.step}\n"
    )
    payload = scorer.weights.astype("<f8").tobytes()
    if scorer.projection is not None:
        payload += scorer.projection.astype("<f8").tobytes()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path, expected_num_labels: Optional[int] = None,
                    expected_input_dim: Optional[int] = None) -> Scorer:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: no header terminator (byte offset {len(data)})")
    try:
        parts = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header is not ASCII (byte offset {exc.start})") from None
    if len(parts) != 2 + len(_HEADER_KEYS) or parts[0] != MAGIC:
        raise CheckpointError(f"{path}: bad header at byte offset 0")
    if parts[1] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {parts[1]!r} at byte offset {len(MAGIC) + 1}")
    fields = {}
    for key, item in zip(_HEADER_KEYS, parts[2:]):
        name, _, value = item.partition("=")
        if name != key:
            raise CheckpointError(f"{path}: expected header field {key!r}, found {item!r}")
        fields[key] = value
    try:
        kind = fields["kind"]
        d, K, hidden = int(fields["d"]), int(fields["K"]), int(fields["hidden"])
        seed, step = int(fields["seed"]), int(fields["step"])
    except ValueError:
        raise CheckpointError(f"{path}: non-integer header field") from None
    if kind not in ("linear", "embedding") or d < 1 or K < 1 or (kind == "embedding") != (hidden > 0):
        raise CheckpointError(f"{path}: inconsistent header {data[:nl]!r}")
    width = hidden if kind == "embedding" else d
    n_table = K * width
    n_proj = hidden * d if kind == "embedding" else 0
    start = nl + 1
    expected_bytes = 8 * (n_table + n_proj)
    found = len(data) - start
    if found != expected_bytes:
        raise CheckpointError(
            f"{path}: payload has {found} bytes, expected {expected_bytes} "
            f"(truncated or padded at byte offset {start + min(found, expected_bytes)})"
        )
    if expected_num_labels is not None and K != expected_num_labels:
        raise CheckpointError(f"{path}: checkpoint has K={K}, expected K={expected_num_labels}")
    if expected_input_dim is not None and d != expected_input_dim:
        raise CheckpointError(f"{path}: checkpoint has d={d}, expected d={expected_input_dim}")
    body = np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64)
    table = body[:n_table].reshape(K, width)
    proj = body[n_table:].reshape(hidden, d) if kind == "embedding" else None
    return Scorer(kind, table, proj, seed=seed, step=step)
