"""Empirical CVaR in its three forms, subpopulation decompositions, bias study, M2 bound.

For losses ``u_1..u_N`` and ``alpha = k/N``:

- closed form: mean of the ``k`` largest losses;
- variational: ``min_{t >= 0} t + sum_i [u_i - t]_+ / (N alpha)``;
- dual: ``max sum_i q_i u_i`` over distributions ``q`` with ``alpha q_i <= p_i``.

All three agree; :mod:`s2m.oracles` checks that they do.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core_math import DomainError, Rng, derive_seed, select_top

__all__ = [
    "CvarEstimate",
    "SubpopIndex",
    "BoundInputs",
    "effective_k",
    "cvar_closed_form",
    "cvar_variational",
    "cvar_dual",
    "shift_nonnegative",
    "agnostic_topk_decomposition",
    "agnostic_empirical_loss",
    "simplex_grid",
    "simplex_vertices",
    "LossSampler",
    "uniform_sampler",
    "exponential_sampler",
    "point_mass_sampler",
    "bernoulli_sampler",
    "BiasStudy",
    "cvar_bias_study",
    "write_bias_csv",
    "m2_bound_terms",
    "rademacher_bound_m2",
]


@dataclass
class CvarEstimate:
    alpha: float
    value: float
    t_star: float
    achieving_weights: np.ndarray
    k: int


@dataclass
class SubpopIndex:
    """Per-example subpopulation ids in ``[0, P)``."""

    assignments: np.ndarray
    num_subpops: int

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.ndim != 1:
            raise DomainError("assignments must be a vector")
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.num_subpops):
            raise DomainError(f"subpopulation ids must lie in [0, {self.num_subpops})")

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "SubpopIndex":
        n = sum(len(g) for g in groups)
        a = np.full(n, -1, dtype=np.int64)
        for p, g in enumerate(groups):
            a[np.asarray(g, dtype=np.int64)] = p
        if np.any(a < 0):
            raise DomainError("groups must partition range(N)")
        return cls(a, len(groups))

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_subpops)

    def members(self, p: int) -> np.ndarray:
        return np.nonzero(self.assignments == p)[0]


@dataclass(frozen=True)
class BoundInputs:
    alpha: float
    delta: float
    B: float
    rademacher: float
    N: int

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if self.B < 0 or self.rademacher < 0:
            raise DomainError("B and the Rademacher complexity must be non-negative")
        if self.N < 1:
            raise DomainError("N must be positive")


def _losses(values) -> np.ndarray:
    u = np.asarray(values, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise DomainError("need a non-empty loss vector")
    if not np.all(np.isfinite(u)):
        raise DomainError("losses must be finite")
    return u


def effective_k(alpha: float, N: int) -> int:
    """``ceil(alpha N)``, treating values within 1e-9 of an integer as that integer."""
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    x = alpha * N
    r = round(x)
    k = r if abs(x - r) <= 1e-9 * max(1.0, x) else math.ceil(x)
    return int(min(max(k, 1), N))


def cvar_closed_form(losses, alpha: float) -> CvarEstimate:
    """Mean of the ``k = ceil(alpha N)`` largest losses; reports the effective ``alpha = k/N``."""
    u = _losses(losses)
    k = effective_k(alpha, u.size)
    sel = select_top(u, k)
    w = np.zeros(u.size)
    w[sel.indices] = 1.0 / k
    return CvarEstimate(k / u.size, float(np.sum(sel.values) / k), float(sel.values[-1]), w, k)


def _variational_objective_many(u: np.ndarray, alpha: float, ts: np.ndarray) -> np.ndarray:
    return ts + np.maximum(u[None, :] - ts[:, None], 0.0).sum(axis=1) / (u.size * alpha)


def shift_nonnegative(losses):
    """Return ``(shifted, offset)`` with ``shifted = losses - offset >= 0``.

    CVaR is translation-equivariant, so ``cvar(losses) = cvar(shifted) + offset``.
    """
    u = _losses(losses)
    offset = min(0.0, float(u.min()))
    return u - offset, offset


def cvar_variational(losses, alpha: float, grid_resolution: int = 64) -> CvarEstimate:
    """Minimise the variational objective over ``t`` in ``[0, max(losses)]``.

    A uniform grid brackets the minimiser (the objective is convex, so the
    minimiser lies between the grid neighbours of the best grid point). The
    objective is piecewise linear with kinks at the losses, so its minimum on
    the bracket is attained at a bracket end or at a kink inside it.
    """
    u = _losses(losses)
    if grid_resolution < 10:
        raise DomainError("grid_resolution must be >= 10")
    if np.any(u < 0):
        raise DomainError("losses must be non-negative; see shift_nonnegative")
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    hi = float(u.max())
    grid = np.linspace(0.0, hi, grid_resolution + 1)
    vals = _variational_objective_many(u, alpha, grid)
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_resolution)]
    candidates = np.concatenate([[a, b], u[(u >= a) & (u <= b)]])
    cvals = _variational_objective_many(u, alpha, candidates)
    j = int(np.argmin(cvals))
    t_star = float(candidates[j])
    w = np.where(u > t_star, 1.0, 0.0) / (u.size * alpha)
    ties = u == t_star
    if ties.any():
        # spread the leftover mass over losses equal to the threshold
        w[ties] = max(0.0, 1.0 - w.sum()) / ties.sum()
    return CvarEstimate(alpha, float(cvals[j]), t_star, w, effective_k(alpha, u.size))


def cvar_dual(losses, base_weights, alpha: float):
    """Worst-case mean over ``Q`` with ``alpha * q_i <= p_i``: greedy water-filling.

    Losses are visited in stable descending order and each receives
    ``min(p_i / alpha, remaining mass)``. Returns ``(value, q)``.
    """
    u = _losses(losses)
    p = np.asarray(base_weights, dtype=np.float64)
    if p.shape != u.shape:
        raise DomainError("base weights must match the losses")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("base weights must be a probability vector")
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    q = np.zeros_like(u)
    remaining = 1.0
    for i in np.argsort(-u, kind="stable"):
        if remaining <= 0:
            break
        take = min(p[i] / alpha, remaining)
        q[i] = take
        remaining -= take
    if alpha == 1.0:
        q = p.copy()
    return float(np.dot(q, u)), q


def agnostic_topk_decomposition(losses, subpop: SubpopIndex, k: int, max_points: int = 10 ** 6):
    """Maximise ``sum_p nu_p * avg_top(k nu_p)(losses in S_p)`` over the grid mixtures.

    ``nu`` ranges over ``{0, 1/k, ..., 1}^P`` with ``k nu_p <= N_p`` and
    ``sum nu = 1``; a zero weight contributes nothing. Returns ``(value, nu)``.
    """
    u = _losses(losses)
    if subpop.assignments.size != u.size:
        raise DomainError("subpopulation index does not match the losses")
    N = u.size
    if not 1 <= k <= N:
        raise DomainError(f"k must satisfy 1 <= k <= {N}")
    P = subpop.num_subpops
    if math.comb(k + P - 1, P - 1) > max_points:
        raise DomainError("mixture grid too large to enumerate")
    sizes = subpop.sizes
    # prefix sums of each group's sorted-descending losses
    prefix = []
    for p in range(P):
        g = np.sort(u[subpop.members(p)])[::-1]
        prefix.append(np.concatenate([[0.0], np.cumsum(g)]))
    best, best_counts = -np.inf, None
    for counts in _compositions(k, P, sizes):
        # nu_p * avg_top(k nu_p) = (sum of the k nu_p largest) / k
        val = sum(prefix[p][c] for p, c in enumerate(counts)) / k
        if val > best:
            best, best_counts = val, counts
    if best_counts is None:
        raise DomainError("no feasible mixture")
    return float(best), np.asarray(best_counts, dtype=np.float64) / k


def _compositions(total: int, parts: int, caps):
    if parts == 1:
        if total <= caps[0]:
            yield (total,)
        return
    for c in range(min(total, int(caps[0])) + 1):
        for rest in _compositions(total - c, parts - 1, caps[1:]):
            yield (c,) + rest


def simplex_vertices(P: int) -> list:
    return [np.eye(P)[p] for p in range(P)]


def simplex_grid(P: int, resolution: float) -> list:
    steps = int(round(1.0 / resolution))
    return [np.asarray(c, dtype=np.float64) / steps for c in _compositions(steps, P, [steps] * P)]


def agnostic_empirical_loss(losses, subpop: SubpopIndex, mixture_set: Iterable):
    """``max over nu in Lambda of sum_p nu_p * mean(losses in S_p)``. Returns ``(value, nu)``."""
    u = _losses(losses)
    sizes = subpop.sizes
    if np.any(sizes == 0):
        raise DomainError("every subpopulation must be non-empty")
    means = np.bincount(subpop.assignments, weights=u, minlength=subpop.num_subpops) / sizes
    best, best_nu = -np.inf, None
    for nu in mixture_set:
        nu = np.asarray(nu, dtype=np.float64)
        if nu.shape != means.shape or np.any(nu < -1e-12) or abs(nu.sum() - 1.0) > 1e-9:
            raise DomainError(f"mixture {nu} is not in the simplex")
        val = float(np.dot(nu, means))
        if val > best:
            best, best_nu = val, nu
    if best_nu is None:
        raise DomainError("mixture set is empty")
    return best, best_nu


# ---------------------------------------------------------------------------
# bias of the empirical CVaR
# ---------------------------------------------------------------------------


@dataclass
class LossSampler:
    """Loss distribution with a known population CVaR."""

    name: str
    draw: Callable[[Rng, tuple], np.ndarray]
    cvar: Callable[[float], float]


def uniform_sampler(low: float = 0.0, high: float = 1.0) -> LossSampler:
    return LossSampler(
        f"uniform({low},{high})",
        lambda rng, shape: low + (high - low) * rng.random(shape),
        lambda a: high - a * (high - low) / 2.0,
    )


def exponential_sampler(rate: float = 1.0) -> LossSampler:
    # the upper alpha-tail of Exp(rate) starts at log(1/alpha)/rate and is memoryless
    return LossSampler(
        f"exponential({rate})",
        lambda rng, shape: -np.log1p(-rng.random(shape)) / rate,
        lambda a: (math.log(1.0 / a) + 1.0) / rate,
    )


def point_mass_sampler(c: float = 1.0) -> LossSampler:
    return LossSampler(f"point_mass({c})", lambda rng, shape: np.full(shape, float(c)), lambda a: float(c))


def bernoulli_sampler(p: float) -> LossSampler:
    """Losses in {0, 1} with ``P(1) = p``; population CVaR is ``min(1, p / alpha)``."""
    return LossSampler(
        f"bernoulli({p})",
        lambda rng, shape: (rng.random(shape) < p).astype(np.float64),
        lambda a: min(1.0, p / a),
    )


@dataclass
class BiasStudy:
    sampler: str
    alpha: float
    population_cvar: float
    N: np.ndarray
    bias_mean: np.ndarray
    bias_stderr: np.ndarray
    decay_exponent: float

    def rows(self):
        for n, b, s in zip(self.N, self.bias_mean, self.bias_stderr):
            yield int(n), float(b), float(s)


def cvar_bias_study(sampler: LossSampler, alpha: float, N_values, replications: int,
                    seed: int, chunk: int = 500) -> BiasStudy:
    """Monte-Carlo estimate of ``CVaR(L) - E[CVaR(L_hat_N)]`` for each ``N``.

    Each ``N`` draws from its own stream derived from ``seed``. The decay
    exponent is the slope of a least-squares fit of ``log bias`` on ``log N``
    (NaN if any bias estimate is not positive).
    """
    if replications < 100:
        raise DomainError("need at least 100 replications")
    pop = sampler.cvar(alpha)
    Ns = np.asarray(list(N_values), dtype=np.int64)
    means, errs = [], []
    for N in Ns:
        rng = Rng(derive_seed(seed, "bias", int(N)))
        k = effective_k(alpha, int(N))
        est = np.empty(replications)
        for start in range(0, replications, chunk):
            m = min(chunk, replications - start)
            u = sampler.draw(rng, (m, int(N)))
            top = -np.sort(-u, axis=1)[:, :k]
            est[start:start + m] = top.sum(axis=1) / k
        bias = pop - est
        means.append(bias.mean())
        errs.append(bias.std(ddof=1) / math.sqrt(replications))
    means = np.asarray(means)
    errs = np.asarray(errs)
    if np.all(means > 0) and Ns.size >= 2:
        slope = float(np.polyfit(np.log(Ns), np.log(means), 1)[0])
    else:
        slope = float("nan")
    return BiasStudy(sampler.name, alpha, pop, Ns, means, errs, slope)


def write_bias_csv(study: BiasStudy, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "bias_mean", "bias_stderr"])
        for row in study.rows():
            w.writerow([row[0], repr(row[1]), repr(row[2])])


def m2_bound_terms(inputs: BoundInputs):
    """``((Rad_N + B / sqrt(N)) / alpha, sqrt(log(1/delta) / (2N)))``."""
    first = (inputs.rademacher + inputs.B / math.sqrt(inputs.N)) / inputs.alpha
    return first, math.sqrt(math.log(1.0 / inputs.delta) / (2.0 * inputs.N))


def rademacher_bound_m2(inputs: BoundInputs) -> float:
    """``(Rad_N + B / sqrt(N)) / alpha + sqrt(log(1/delta) / (2N))``."""
    first, second = m2_bound_terms(inputs)
    return first + second
