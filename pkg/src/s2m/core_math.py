"""Order statistics, order-weighted averages, finite differences and the PRNG.

Everything here is deterministic. Ranking uses a stable descending order:
larger values first, and among equal values the lower original index first.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DomainError",
    "RankedSelection",
    "OwaWeights",
    "ComparisonCounter",
    "Rng",
    "derive_seed",
    "select_top",
    "avg_top",
    "owa",
    "top_k_weights",
    "finite_diff_gradient",
    "sample_without_replacement",
]


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


def _as_finite_vector(values, name="values") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class RankedSelection:
    """Top-k entries of a vector in stable descending order."""

    indices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class OwaWeights:
    """Rank-indexed weights of an order-weighted average."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DomainError("OWA weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DomainError("OWA weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DomainError(f"OWA weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)


class ComparisonCounter:
    """Counts pairwise comparisons made by an instrumented sort."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def _stable_descending_order(arr: np.ndarray, counter: Optional[ComparisonCounter] = None) -> np.ndarray:
    if counter is None:
        # argsort of the negation with a stable kind keeps lower indices first on ties
        return np.argsort(-arr, kind="stable")

    def cmp(i, j):
        counter.count += 1
        a, b = arr[i], arr[j]
        if a > b:
            return -1
        if a < b:
            return 1
        return 0

    # sorted() is stable, so equal values keep their index order
    return np.asarray(sorted(range(arr.size), key=functools.cmp_to_key(cmp)), dtype=np.int64)


def select_top(values, k: int, counter: Optional[ComparisonCounter] = None) -> RankedSelection:
    """Select the ``k`` largest entries of ``values``.

    Ties are broken by the lower original index. When ``counter`` is given the
    selection runs through an instrumented comparison sort that records every
    comparison it performs; the result is identical to the fast path.
    """
    arr = _as_finite_vector(values)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= arr.size:
        raise DomainError(f"k must satisfy 1 <= k <= {arr.size}, got {k!r}")
    order = _stable_descending_order(arr, counter)[: int(k)]
    return RankedSelection(indices=order, values=arr[order])


def avg_top(values, k: int) -> float:
    """Mean of the ``k`` largest entries of ``values``.

    >>> avg_top([3.0, 1.0, 2.0], 2)
    2.5
    """
    sel = select_top(values, k)
    return float(np.sum(sel.values) / k)


def top_k_weights(n: int, k: int) -> OwaWeights:
    """OWA weights placing ``1/k`` on the first ``k`` ranks of an ``n``-vector."""
    if not 1 <= k <= n:
        raise DomainError(f"k must satisfy 1 <= k <= {n}, got {k!r}")
    w = np.zeros(n)
    w[:k] = 1.0 / k
    return OwaWeights(w)


def owa(values, w) -> float:
    """Order-weighted average ``sum_i w_i * z_[i]`` with ``z_[i]`` the i-th largest value."""
    arr = _as_finite_vector(values)
    weights = w.weights if isinstance(w, OwaWeights) else OwaWeights(np.asarray(w, dtype=np.float64)).weights
    if weights.size != arr.size:
        raise DomainError(f"length mismatch: {arr.size} values, {weights.size} weights")
    ranked = arr[_stable_descending_order(arr)]
    return float(np.dot(weights, ranked))


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h!r}")
    x = np.array(x, dtype=np.float64, ndmin=1)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"function is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_NEG_53 = 2.0 ** -53


def _splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """SplitMix64 output for stream positions ``counters`` (0-based)."""
    z = np.uint64(seed & _MASK64) + (counters.astype(np.uint64) + np.uint64(1)) * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *labels) -> int:
    """Derive a 64-bit sub-seed from a master seed and a label path.

    The sub-seed is the first 8 bytes (little-endian) of the BLAKE2b digest of
    ``"<seed>/<label1>/<label2>..."``. Adding a new label never changes seeds
    derived for existing labels.
    """
    key = "/".join([str(int(seed) & _MASK64)] + [str(lab) for lab in labels])
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


class Rng:
    """Counter-based SplitMix64 generator.

    The i-th 64-bit output (i = 0, 1, ...) of a generator seeded with ``s`` is::

        z = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
        out = z ^ (z >> 31)

    which is exactly the sequential SplitMix64 stream. Derived quantities:

    - uniform double in [0, 1): ``(out >> 11) * 2**-53``
    - integer in [0, n): ``floor(uniform * n)``
    - standard normal: Box-Muller from two consecutive uniforms ``u1, u2`` as
      ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)``
    """

    _BLOCK = 1024

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = 0
        self._cache = np.empty(0, dtype=np.uint64)
        self._cache_start = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, position={self.position})"

    def copy(self) -> "Rng":
        other = Rng(self.seed)
        other.position = self.position
        return other

    def spawn(self, *labels) -> "Rng":
        """Independent generator keyed by ``labels`` (does not advance this one)."""
        return Rng(derive_seed(self.seed, *labels))

    def next_u64(self, size: int) -> np.ndarray:
        start = self.position
        end = start + size
        cache_end = self._cache_start + self._cache.size
        if start >= self._cache_start and end <= cache_end:
            out = self._cache[start - self._cache_start: end - self._cache_start]
        elif size <= self._BLOCK // 4:
            self._cache = _splitmix64(self.seed, np.arange(start, start + self._BLOCK, dtype=np.uint64))
            self._cache_start = start
            out = self._cache[:size]
        else:
            out = _splitmix64(self.seed, np.arange(start, end, dtype=np.uint64))
        self.position = end
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise DomainError(f"upper bound must be positive, got {n}")
        return min(int(self.random() * n), n - 1)

    def integers(self, n: int, size) -> np.ndarray:
        if n <= 0:
            raise DomainError(f"upper bound must be positive, got {n}")
        return np.minimum((self.random(size) * n).astype(np.int64), n - 1)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws (one Box-Muller pair of uniforms per draw)."""
        n = int(np.prod(size))
        u = self.random(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)


def sample_without_replacement(n: int, k: int, rng: Rng) -> np.ndarray:
    """Uniform ordered sample of ``k`` distinct integers from [0, n).

    Partial Fisher-Yates on a virtual identity permutation: step ``i`` swaps
    position ``i`` with ``i + below(n - i)``. Only displaced positions are
    stored, so the cost is O(k) regardless of ``n``.
    """
    if not 0 <= k <= n:
        raise DomainError(f"cannot draw {k} distinct items from {n}")
    swapped: dict[int, int] = {}
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        j = i + rng.below(n - i)
        vi = swapped.get(i, i)
        vj = swapped.get(j, j)
        out[i] = vj
        swapped[j] = vi
    return out
