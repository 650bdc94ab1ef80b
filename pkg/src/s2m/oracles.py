"""Brute-force verifiers for the identities the rest of the package relies on.

Each checker recomputes a quantity along a path that shares nothing with the
implementation under test beyond the primitives in :mod:`s2m.core_math`:

- CVaR: closed form vs variational minimisation vs dual water-filling vs LP
  vertex enumeration, and the subpopulation decomposition vs pooled top-k;
- expected top-k' minibatch loss: exhaustive enumeration vs rank weights vs
  Monte-Carlo over the real minibatch sampler;
- the minimiser of ``sum_y p_y [-log(tau g_y)]_+`` over the simplex: closed
  form vs a numerical dual-decomposition solver vs random simplex points;
- gradients: analytic chain rule vs central differences, end to end.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .core_math import DomainError, Rng, avg_top, derive_seed, finite_diff_gradient, owa
from .cvar import (
    SubpopIndex,
    agnostic_topk_decomposition,
    cvar_closed_form,
    cvar_dual,
    cvar_variational,
)
from .datagen import Dataset
from .losses import LossSpec, MarginLoss, near_kink, relative_error
from .mining import (
    MiningConfig,
    expected_loss_oracle,
    minibatch_top_k,
    s2m_minibatch_loss,
    sample_minibatch,
)
from .model import Scorer

__all__ = [
    "OracleReport",
    "ConsistencyProblem",
    "ConsistencySolution",
    "consistency_objective",
    "topk_softmax_minimizer",
    "numerical_simplex_minimizer",
    "random_simplex_gap",
    "grid_search_cvar",
    "lp_vertex_dual",
    "verify_cvar_equivalences",
    "verify_decomposition",
    "merge_reports",
    "verify_expected_owa",
    "verify_consistency",
    "verify_gradients",
    "minibatch_gradient_error",
    "GRADIENT_SPECS",
    "SUITES",
]


@dataclass
class OracleReport:
    suite: str
    cases: int = 0
    worst: Dict[str, float] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def record(self, name: str, deviation: float, tol: float, context: str = "") -> None:
        self.worst[name] = max(self.worst.get(name, 0.0), float(deviation))
        if not deviation <= tol:
            self.violations.append(f"{name}: deviation {deviation:.3e} > {tol:.0e} {context}".rstrip())

    def to_text(self) -> str:
        lines = [f"suite {self.suite}: {'PASS' if self.passed else 'FAIL'} ({self.cases} cases)"]
        for name, dev in sorted(self.worst.items()):
            lines.append(f"  worst {name}: {dev:.3e}")
        for v in self.violations[:20]:
            lines.append(f"  violation {v}")
        if len(self.violations) > 20:
            lines.append(f"  ... {len(self.violations) - 20} more violations")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["suite", "check", "worst_deviation"])
            for name, dev in sorted(self.worst.items()):
                w.writerow([self.suite, name, repr(dev)])


# ---------------------------------------------------------------------------
# CVaR
# ---------------------------------------------------------------------------


def grid_search_cvar(losses, alpha: float, points: int = 20001) -> float:
    """Variational objective minimised over a plain uniform grid plus the sample points."""
    u = np.asarray(losses, dtype=np.float64)
    ts = np.union1d(np.linspace(0.0, float(u.max()), points), u)
    obj = ts + np.maximum(u[None, :] - ts[:, None], 0.0).sum(axis=1) / (u.size * alpha)
    return float(obj.min())


def lp_vertex_dual(losses, base_weights, alpha: float):
    """Solve ``max q.u`` s.t. ``0 <= q <= p/alpha``, ``sum q = 1`` by vertex enumeration.

    A vertex has every coordinate at a bound except at most one. Exponential in
    N; intended for N <= 12.
    """
    u = np.asarray(losses, dtype=np.float64)
    cap = np.asarray(base_weights, dtype=np.float64) / alpha
    n = u.size
    best, best_q = -np.inf, None
    for free in range(n):
        others = [i for i in range(n) if i != free]
        for mask in itertools.product((0, 1), repeat=n - 1):
            q = np.zeros(n)
            for i, m in zip(others, mask):
                q[i] = cap[i] if m else 0.0
            rest = 1.0 - q.sum()
            if rest < -1e-12 or rest > cap[free] + 1e-12:
                continue
            q[free] = min(max(rest, 0.0), cap[free])
            val = float(q @ u)
            if val > best:
                best, best_q = val, q
    return best, best_q


def _fuzz_losses(rng: Rng, N: int) -> np.ndarray:
    kind = rng.below(4)
    if kind == 0:
        return rng.random(N) * 10.0
    if kind == 1:
        return np.floor(rng.random(N) * 4.0)  # heavy ties
    if kind == 2:
        return -np.log1p(-rng.random(N))
    return np.full(N, float(rng.below(5)))


def verify_cvar_equivalences(N_max: int = 64, fuzz_cases: int = 1000, seed: int = 0) -> OracleReport:
    """Closed form = variational = dual (uniform weights) for every ``k`` on fuzzed vectors."""
    if N_max > 64:
        raise DomainError("N_max must be <= 64")
    rep = OracleReport("cvar")
    master = Rng(derive_seed(seed, "cvar-fuzz"))
    for case in range(fuzz_cases):
        rng = master.spawn(case)
        u = _fuzz_losses(rng, 1 + rng.below(N_max))
        N = u.size
        p = np.full(N, 1.0 / N)
        rep.cases += 1
        for k in range(1, N + 1):
            alpha = k / N
            closed = cvar_closed_form(u, alpha).value
            var = cvar_variational(u, alpha).value
            dual, q = cvar_dual(u, p, alpha)
            ctx = f"(case {case}, k={k}, u={u.tolist()})"
            rep.record("closed_vs_variational", abs(closed - var), 1e-9, ctx)
            rep.record("closed_vs_dual", abs(closed - dual), 1e-9, ctx)
            rep.record("dual_mass", abs(q.sum() - 1.0), 1e-12, ctx)
            rep.record("dual_cap", max(0.0, float(np.max(alpha * q - p))), 1e-12, ctx)
            if k == N:
                rep.record("full_mass_is_mean", abs(closed - float(np.mean(u))), 1e-9, ctx)
    return rep


def verify_decomposition(N_max: int = 30, P_max: int = 4, fuzz_cases: int = 500, seed: int = 0) -> OracleReport:
    """Subpopulation decomposition equals the pooled top-k average on random partitions, every ``k``."""
    rep = OracleReport("decomposition")
    master = Rng(derive_seed(seed, "partition-fuzz"))
    for case in range(fuzz_cases):
        rng = master.spawn(case)
        u = _fuzz_losses(rng, 1 + rng.below(N_max))
        P = 1 + rng.below(P_max)
        sub = SubpopIndex(rng.integers(P, u.size), P)
        rep.cases += 1
        for k in range(1, u.size + 1):
            val, nu = agnostic_topk_decomposition(u, sub, k)
            pooled = avg_top(u, k)
            ctx = f"(case {case}, k={k}, P={P})"
            rep.record("decomposition_vs_pooled", abs(val - pooled) / max(1.0, abs(pooled)), 1e-12, ctx)
            rep.record("mixture_mass", abs(nu.sum() - 1.0), 1e-12, ctx)
    return rep


def merge_reports(suite: str, *reports: OracleReport) -> OracleReport:
    out = OracleReport(suite)
    for rep in reports:
        out.cases += rep.cases
        for name, dev in rep.worst.items():
            out.worst[name] = max(out.worst.get(name, 0.0), dev)
        out.violations.extend(rep.violations)
    return out


# ---------------------------------------------------------------------------
# expected top-k' minibatch loss
# ---------------------------------------------------------------------------


def _brute_expectation(u: np.ndarray, n_mb: int, k: int) -> float:
    vals = [avg_top(u[list(c)], k) for c in itertools.combinations(range(u.size), n_mb)]
    return math.fsum(vals) / len(vals)


def monte_carlo_top_k(u: np.ndarray, n_mb: int, k: int, draws: int, seed: int):
    """Mean and standard error of the top-k' loss over ``draws`` sampled minibatches."""
    dataset = Dataset(np.zeros((u.size, 1)), np.zeros(u.size, dtype=np.int64), 1)
    cfg = MiningConfig(minibatch_size=n_mb, example_top_k=k)
    rng = Rng(seed)
    vals = np.empty(draws)
    for i in range(draws):
        idx = sample_minibatch(dataset, cfg, rng)
        vals[i] = minibatch_top_k(u[idx], k)[0]
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(draws))


def verify_expected_owa(N_max: int = 8, fuzz_cases: int = 3, seed: int = 0,
                        mc_draws: int = 0, mc_cases=()) -> OracleReport:
    """Enumeration vs OWA form for every ``(N <= N_max, N_mb, k')``.

    For each combination: (a) brute-force expectation equals ``owa(u, theta)``
    with the recovered weights; (b) a second loss vector with the same sort
    order yields identical ``theta``; ``theta`` is non-increasing and sums to 1.
    (c) For each ``(N, N_mb, k')`` in ``mc_cases`` the Monte-Carlo mean over
    ``mc_draws`` minibatches lies within 3 standard errors of the exact value.
    """
    if N_max > 8:
        raise DomainError("N_max must be <= 8 for enumeration")
    rep = OracleReport("owa")
    master = Rng(derive_seed(seed, "owa-fuzz"))
    for N in range(1, N_max + 1):
        for n_mb in range(1, N + 1):
            for k in range(1, n_mb + 1):
                for case in range(fuzz_cases):
                    rng = master.spawn(N, n_mb, k, case)
                    u = rng.random(N) * 5.0
                    ex = expected_loss_oracle(u, n_mb, k)
                    brute = _brute_expectation(u, n_mb, k)
                    ctx = f"(N={N}, N_mb={n_mb}, k'={k})"
                    rep.cases += 1
                    rep.record("enumeration_vs_owa", abs(brute - owa(u, ex.theta)), 1e-12, ctx)
                    rep.record("oracle_value", abs(brute - ex.value), 1e-12, ctx)
                    # same ranks, different values
                    v = np.empty(N)
                    order = np.argsort(-u, kind="stable")
                    v[order] = np.sort(rng.random(N) * 3.0)[::-1]
                    ex2 = expected_loss_oracle(v, n_mb, k)
                    rep.record("rank_only_weights", float(np.max(np.abs(ex.theta.weights - ex2.theta.weights))), 1e-12, ctx)
                    rep.record("theta_monotone", float(np.max(np.diff(ex.theta.weights), initial=0.0)), 1e-12, ctx)
                    rep.record("theta_mass", abs(ex.theta.weights.sum() - 1.0), 1e-9, ctx)
    for N, n_mb, k in mc_cases:
        rng = master.spawn("mc", N, n_mb, k)
        u = rng.random(N) * 5.0
        exact = expected_loss_oracle(u, n_mb, k).value
        mean, se = monte_carlo_top_k(u, n_mb, k, mc_draws, derive_seed(seed, "mc-draws", N, n_mb, k))
        z = abs(mean - exact) / se if se > 0 else (0.0 if mean == exact else np.inf)
        rep.record("monte_carlo_z", z, 3.0, f"(N={N}, N_mb={n_mb}, k'={k}, exact={exact}, mc={mean}+-{se})")
    return rep


# ---------------------------------------------------------------------------
# minimiser of sum_y p_y [-log(tau g_y)]_+ over the simplex
# ---------------------------------------------------------------------------


@dataclass
class ConsistencyProblem:
    p: np.ndarray
    tau: float

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-9:
            raise DomainError("p must be a probability vector")
        if not self.tau > 1:
            raise DomainError("tau must exceed 1")
        if not self.p.size / self.tau > 1:
            raise DomainError("need K / tau > 1")


@dataclass
class ConsistencySolution:
    g: np.ndarray
    collapsed: np.ndarray  # labels with g_y = 1/tau
    objective: float


def consistency_objective(problem: ConsistencyProblem, g) -> float:
    g = np.asarray(g, dtype=np.float64)
    with np.errstate(divide="ignore"):
        terms = np.maximum(-np.log(problem.tau * g), 0.0)
    terms = np.where(problem.p > 0, terms, 0.0)
    return float(np.dot(problem.p, terms))


def topk_softmax_minimizer(problem: ConsistencyProblem) -> ConsistencySolution:
    """Closed-form minimiser.

    Labels are visited in descending ``p``; a label joins the collapsed set
    (where ``g_y = 1/tau``) while ``p_y >= (1/tau)(1 - P_1)/(1 - |Y_1|/tau)``
    with ``P_1`` the mass already collapsed. The rest share the remaining mass
    in proportion to ``p``.
    """
    p, tau = problem.p, problem.tau
    order = np.argsort(-p, kind="stable")
    collapsed: list = []
    mass = 0.0
    for y in order:
        n1 = len(collapsed)
        if 1.0 - n1 / tau <= 0:
            raise DomainError("infeasible: collapsed labels exhaust the simplex")
        threshold = (1.0 / tau) * (1.0 - mass) / (1.0 - n1 / tau)
        if p[y] < threshold:
            break
        collapsed.append(int(y))
        mass += p[y]
    n1 = len(collapsed)
    if n1 / tau > 1.0 + 1e-12:
        raise DomainError("infeasible: |Y_1| / tau > 1")
    g = np.zeros_like(p)
    rest = np.setdiff1d(np.arange(p.size), collapsed)
    if rest.size:
        remaining = 1.0 - mass
        scale = (1.0 - n1 / tau) / remaining if remaining > 0 else 0.0
        g[rest] = scale * p[rest]
    g[collapsed] = 1.0 / tau
    return ConsistencySolution(g, np.asarray(sorted(collapsed), dtype=np.int64),
                               consistency_objective(problem, g))


def numerical_simplex_minimizer(problem: ConsistencyProblem, tol: float = 1e-13) -> np.ndarray:
    """Generic separable convex solver: bisection on the multiplier of ``sum g = 1``.

    For a multiplier ``mu > 0`` each coordinate solves the scalar problem
    ``min_{0 <= g <= 1} p_y [-log(tau g)]_+ + mu g`` by bounded Brent search;
    ``mu`` is then tuned by root finding until the coordinates sum to one.
    Nothing here uses the structure of the closed form.
    """
    p, tau = problem.p, problem.tau

    def coord(y: int, mu: float) -> float:
        if p[y] == 0:
            return 0.0
        f = lambda g: p[y] * max(-math.log(tau * g), 0.0) + mu * g  # noqa: E731
        res = minimize_scalar(f, bounds=(1e-300, 1.0), method="bounded",
                              options={"xatol": 1e-15, "maxiter": 2000})
        return float(res.x)

    def excess(log_mu: float) -> float:
        mu = math.exp(log_mu)
        return sum(coord(y, mu) for y in range(p.size)) - 1.0

    lo, hi = -30.0, 30.0
    log_mu = brentq(excess, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    mu = math.exp(log_mu)
    g = np.array([coord(y, mu) for y in range(p.size)])
    return g / g.sum()


def _dirichlet(rng: Rng, K: int, count: int) -> np.ndarray:
    e = -np.log1p(-rng.random((count, K)))
    return e / e.sum(axis=1, keepdims=True)


def random_simplex_gap(problem: ConsistencyProblem, g, points: int, rng: Rng) -> float:
    """``objective(g) - min objective over random simplex points`` (<= 0 when ``g`` wins)."""
    G = _dirichlet(rng, problem.p.size, points)
    with np.errstate(divide="ignore"):
        terms = np.maximum(-np.log(problem.tau * G), 0.0)
    objs = np.where(problem.p[None, :] > 0, terms, 0.0) @ problem.p
    return consistency_objective(problem, g) - float(objs.min())


def random_problem(rng: Rng, max_labels: int = 6) -> ConsistencyProblem:
    K = 2 + rng.below(max_labels - 1)
    p = _dirichlet(rng, K, 1)[0]
    tau = 1.0 + (K - 1.0) * (0.05 + 0.9 * rng.random())  # 1 < tau < K
    return ConsistencyProblem(p, tau)


def verify_consistency(fuzz_cases: int = 50, random_points: int = 10 ** 4, seed: int = 0) -> OracleReport:
    rep = OracleReport("consistency")
    master = Rng(derive_seed(seed, "consistency"))
    for case in range(fuzz_cases):
        rng = master.spawn(case)
        prob = random_problem(rng)
        sol = topk_softmax_minimizer(prob)
        g_num = numerical_simplex_minimizer(prob)
        ctx = f"(p={prob.p.tolist()}, tau={prob.tau})"
        rep.cases += 1
        rep.record("closed_vs_numerical_objective",
                   abs(sol.objective - consistency_objective(prob, g_num)), 1e-6, ctx)
        rep.record("closed_vs_numerical_g", float(np.max(np.abs(sol.g - g_num))), 1e-6, ctx)
        rep.record("sums_to_one", abs(sol.g.sum() - 1.0), 1e-12, ctx)
        rep.record("respects_cap", max(0.0, float(np.max(sol.g - 1.0 / prob.tau))), 1e-12, ctx)
        rep.record("beats_random_points", max(0.0, random_simplex_gap(prob, sol.g, random_points, rng)), 0.0, ctx)
    return rep


# ---------------------------------------------------------------------------
# end-to-end gradients
# ---------------------------------------------------------------------------

GRADIENT_SPECS = {
    "bowl_hinge": LossSpec("bowl", label_top_k=2, base=MarginLoss("hinge")),
    "bowl_logistic": LossSpec("bowl", label_top_k=2, base=MarginLoss("logistic")),
    "bowl_squared_hinge": LossSpec("bowl", label_top_k=2, base=MarginLoss("squared_hinge")),
    "crammer_singer": LossSpec("crammer_singer", label_top_k=1),
    "averaged": LossSpec("averaged", label_top_k=None),
    "softmax_ce": LossSpec("softmax_ce", label_top_k=None),
    "cosine_contrastive": LossSpec("cosine_contrastive", label_top_k=2, cosine_margin=0.2),
}


def _get_params(s: Scorer) -> np.ndarray:
    parts = [s.weights.ravel()]
    if s.projection is not None:
        parts.append(s.projection.ravel())
    return np.concatenate(parts)


def _set_params(s: Scorer, theta: np.ndarray) -> None:
    n = s.weights.size
    s.weights[...] = theta[:n].reshape(s.weights.shape)
    if s.projection is not None:
        s.projection[...] = theta[n:].reshape(s.projection.shape)


def _flat_grad(s: Scorer, grad) -> np.ndarray:
    gw = np.zeros_like(s.weights)
    gw[grad.rows] = grad.row_grads
    parts = [gw.ravel()]
    if s.projection is not None:
        parts.append(grad.projection.ravel())
    return np.concatenate(parts)


def minibatch_gradient_error(scorer: Scorer, dataset: Dataset, cfg: MiningConfig, spec: LossSpec,
                             rng: Rng, h: float = 1e-6, gap: float = 1e-3) -> Optional[float]:
    """Relative error of the parameter gradient of one S2M minibatch loss.

    Returns ``None`` when the point is within ``gap`` of a kink: a hinge
    corner, a tie at the label top-k boundary, or a tie at the example top-k'
    boundary.
    """
    batch = sample_minibatch(dataset, cfg, rng)
    label_state = rng.copy()
    mb = s2m_minibatch_loss(scorer, dataset, batch, cfg, spec, label_state.copy())
    S = scorer.score_subset_batch(dataset.features[batch], mb.label_sets, normalize=spec.uses_cosine)
    for row in S:
        if near_kink(0, row, spec):
            return None
    if cfg.example_top_k < cfg.minibatch_size:
        ranked = np.sort(mb.per_example)[::-1]
        if ranked[cfg.example_top_k - 1] - ranked[cfg.example_top_k] < gap:
            return None
    analytic = _flat_grad(scorer, scorer.gradient(dataset.features[batch], mb.label_sets,
                                                  mb.score_grads, normalize=spec.uses_cosine))
    probe = scorer.copy()

    def loss_at(theta):
        _set_params(probe, theta)
        return s2m_minibatch_loss(probe, dataset, batch, cfg, spec, label_state.copy()).value

    numeric = finite_diff_gradient(loss_at, _get_params(scorer), h)
    return relative_error(analytic, numeric)


def verify_gradients(trials: int = 100, seed: int = 0, specs=None, scorers=("linear", "embedding"),
                     num_labels: int = 6, dim: int = 4, hidden: int = 3, max_attempts: int = 20) -> OracleReport:
    """Analytic vs central-difference gradients for each composition and scorer kind."""
    rep = OracleReport("gradients")
    specs = GRADIENT_SPECS if specs is None else specs
    for name, spec in specs.items():
        for kind in scorers:
            tol = 1e-5 if spec.composition == "softmax_ce" else 1e-4
            checked = 0
            for trial in range(trials):
                rng = Rng(derive_seed(seed, "grad", name, kind, trial))
                for _ in range(max_attempts):
                    sseed = int(rng.random() * 2 ** 31)
                    n_ex = 8
                    X = 1.5 * rng.normal((n_ex, dim))
                    y = rng.integers(num_labels, n_ex)
                    ds = Dataset(X, y, num_labels)
                    if kind == "linear":
                        sc = Scorer.linear(dim, num_labels, seed=sseed)
                        sc.weights *= 3.0
                    else:
                        sc = Scorer.embedding(dim, num_labels, hidden, seed=sseed)
                        sc.weights *= 2.0
                        sc.projection *= 2.0
                    cfg = MiningConfig(minibatch_size=4, example_top_k=2,
                                       label_sample_size=None if spec.composition == "averaged" else 4)
                    err = minibatch_gradient_error(sc, ds, cfg, spec, rng)
                    if err is not None:
                        rep.record(f"{name}/{kind}", err, tol, f"(trial {trial})")
                        checked += 1
                        break
            rep.cases += checked
            if checked < trials:
                rep.violations.append(f"{name}/{kind}: only {checked}/{trials} points away from kinks")
    return rep


SUITES = ("cvar", "owa", "consistency", "gradients")
