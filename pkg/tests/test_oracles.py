import numpy as np
import pytest

from s2m.core_math import DomainError, Rng
from s2m.losses import LossSpec
from s2m.oracles import (
    GRADIENT_SPECS,
    ConsistencyProblem,
    OracleReport,
    consistency_objective,
    grid_search_cvar,
    lp_vertex_dual,
    numerical_simplex_minimizer,
    random_problem,
    random_simplex_gap,
    topk_softmax_minimizer,
    verify_consistency,
    verify_cvar_equivalences,
    verify_expected_owa,
    verify_gradients,
)


class TestConsistency:
    @pytest.mark.parametrize("p,tau,g,collapsed", [
        ([0.6, 0.3, 0.1], 2.0, [0.5, 0.375, 0.125], [0]),
        ([0.5, 0.3, 0.2], 2.0, [0.5, 0.3, 0.2], [0]),
        ([0.25, 0.25, 0.25, 0.25], 3.0, [0.25, 0.25, 0.25, 0.25], []),
    ])
    def test_closed_form(self, p, tau, g, collapsed):
        sol = topk_softmax_minimizer(ConsistencyProblem(p, tau))
        np.testing.assert_allclose(sol.g, g, atol=1e-15)
        assert sol.collapsed.tolist() == collapsed

    def test_numerical_solver_agrees(self):
        prob = ConsistencyProblem([0.6, 0.3, 0.1], 2.0)
        np.testing.assert_allclose(numerical_simplex_minimizer(prob), [0.5, 0.375, 0.125], atol=1e-6)

    def test_objective_by_hand(self):
        prob = ConsistencyProblem([0.6, 0.3, 0.1], 2.0)
        expected = 0.3 * -np.log(0.75) + 0.1 * -np.log(0.25)
        assert consistency_objective(prob, [0.5, 0.375, 0.125]) == pytest.approx(expected, rel=1e-14)

    def test_beats_random_points(self):
        rng = Rng(0)
        for _ in range(20):
            prob = random_problem(rng)
            assert random_simplex_gap(prob, topk_softmax_minimizer(prob).g, 2000, rng) <= 0.0

    @pytest.mark.parametrize("p,tau", [([0.5, 0.5], 1.0), ([0.5, 0.5], 2.0), ([0.7, 0.7], 1.5)])
    def test_invalid_problems(self, p, tau):
        with pytest.raises(DomainError):
            ConsistencyProblem(p, tau)


class TestCvarHelpers:
    def test_vertex_dual_hand_case(self):
        val, q = lp_vertex_dual([1.0, 3.0, 2.0], [1 / 3] * 3, 2 / 3)
        assert val == pytest.approx(2.5)
        np.testing.assert_allclose(q, [0.0, 0.5, 0.5])

    def test_grid_search(self):
        assert grid_search_cvar([1.0, 3.0, 2.0, 4.0], 0.5) == pytest.approx(3.5)


class TestSuites:
    def test_cvar_suite_small(self):
        rep = verify_cvar_equivalences(N_max=12, fuzz_cases=40, seed=1)
        assert rep.passed, rep.to_text()

    def test_owa_suite_small(self):
        rep = verify_expected_owa(N_max=5, fuzz_cases=1, seed=1, mc_draws=4000, mc_cases=[(4, 2, 1)])
        assert rep.passed, rep.to_text()

    def test_consistency_suite_small(self):
        rep = verify_consistency(fuzz_cases=5, random_points=500, seed=1)
        assert rep.passed, rep.to_text()

    def test_gradient_suite_small(self):
        rep = verify_gradients(trials=3, seed=1, specs={"softmax": GRADIENT_SPECS["softmax_ce"],
                                                         "hinge": GRADIENT_SPECS["bowl_hinge"]})
        assert rep.passed, rep.to_text()

    def test_gradient_suite_flags_wrong_gradient(self, monkeypatch):
        import s2m.oracles as oracles

        real = oracles.Scorer.gradient

        def skewed(self, *a, **kw):
            g = real(self, *a, **kw)
            g.row_grads *= 1.01
            return g

        monkeypatch.setattr(oracles.Scorer, "gradient", skewed)
        rep = verify_gradients(trials=2, seed=0, specs={"ce": LossSpec("softmax_ce", None)}, scorers=("linear",))
        assert not rep.passed

    def test_report_outputs(self, tmp_path):
        rep = OracleReport("demo")
        rep.record("a", 1e-3, 1e-6, "(ctx)")
        rep.record("b", 0.0, 1e-6)
        assert not rep.passed
        assert "FAIL" in rep.to_text() and "(ctx)" in rep.to_text()
        rep.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "suite,check,worst_deviation"
