import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daae_lab.theorems import (
    AssignmentProblem,
    SolverError,
    cluster_perturbation,
    default_theorem2_grid,
    four_point_instances,
    group_partitions,
    optimal_decoder_objective,
    theorem2_bounds,
    theorem2_condition,
    theorem2_delta_max,
    theorem2_delta_max_halved,
    theorem3_bound,
    verify_theorem1,
    verify_theorem2,
    verify_theorem3,
)

cp = pytest.importorskip("cvxpy")


def cvxpy_optimum(problem: AssignmentProblem) -> float:
    n = problem.n
    allow = problem.L * problem.distances()
    ell = cp.Variable((n, n))
    cons = [cp.log_sum_exp(ell[:, k]) <= 0 for k in range(n)]
    for j, k in itertools.permutations(range(n), 2):
        cons.append(ell[:, j] - ell[:, k] <= allow[j, k])
    prob = cp.Problem(cp.Maximize(cp.sum(cp.multiply(problem.weights(), ell))), cons)
    prob.solve(solver=cp.CLARABEL)
    return float(prob.value)


def random_problem(rng, n, L, P=None):
    return AssignmentProblem(rng.standard_normal((n, 2)), np.eye(n) if P is None else P, L, rng.permutation(n))


class TestSolver:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_cvxpy(self, seed):
        rng = np.random.default_rng(seed)
        n = 3 + seed % 3
        P = rng.dirichlet(np.ones(n), size=n)
        prob = random_problem(rng, n, L=[0.3, 1.0, 3.0][seed % 3], P=P)
        val, cert = optimal_decoder_objective(prob)
        assert val == pytest.approx(cvxpy_optimum(prob), abs=1e-5)
        assert cert.max_violation < 1e-6
        assert 0 <= cert.duality_gap < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_sparse_weights_still_certified(self, seed):
        # identity corruption leaves most weights zero, so raw barrier multipliers are not dual feasible
        prob = random_problem(np.random.default_rng(seed), 4, L=1.0)
        val, cert = optimal_decoder_objective(prob)
        assert 0 <= cert.duality_gap < 1e-5
        assert val - 1e-6 <= cvxpy_optimum(prob) <= cert.dual_bound + 1e-6

    def test_l_zero_gives_uniform(self):
        rng = np.random.default_rng(0)
        val, _ = optimal_decoder_objective(random_problem(rng, 4, L=0.0))
        assert val == pytest.approx(-math.log(4), abs=1e-6)

    def test_large_l_approaches_zero(self):
        z = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        val, _ = optimal_decoder_objective(AssignmentProblem(z, np.eye(4), 1e3, np.arange(4)))
        assert -1e-6 < val <= 0

    def test_case1_named_point_bound(self):
        val, _ = optimal_decoder_objective(four_point_instances(0.4, 2.0, 1.0)["case1"])
        assert 8 * val >= 8 * math.log(1 / (1 + math.exp(-2)) / 2) - 1e-4

    def test_too_many_items(self):
        n = 13
        with pytest.raises(ValueError, match="at most"):
            optimal_decoder_objective(AssignmentProblem(np.zeros((n, 2)), np.eye(n), 1.0, np.arange(n)))

    def test_budget_exhaustion_reports_residuals(self):
        rng = np.random.default_rng(0)
        with pytest.raises(SolverError) as err:
            optimal_decoder_objective(random_problem(rng, 4, 1.0), max_newton=3)
        assert "steps" in err.value.residuals

    @pytest.mark.parametrize("bad", [
        dict(P=np.full((3, 3), 0.5)),
        dict(L=-1.0),
        dict(matching=np.array([0, 0, 1])),
        dict(P=np.eye(2)),
    ])
    def test_problem_validation(self, bad):
        kw = dict(latents=np.zeros((3, 2)), P=np.eye(3), L=1.0, matching=np.arange(3))
        kw.update(bad)
        with pytest.raises(ValueError):
            AssignmentProblem(**kw)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.floats(1.0, 3.0))
    def test_monotone_in_lipschitz_constant(self, seed, L, factor):
        prob = random_problem(np.random.default_rng(seed), 4, L)
        looser = AssignmentProblem(prob.latents, prob.P, L * factor, prob.matching)
        lo, c1 = optimal_decoder_objective(prob)
        hi, c2 = optimal_decoder_objective(looser)
        assert lo <= hi + 1e-6
        assert hi <= 1e-12 and c1.max_violation < 1e-6 and c2.max_violation < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_identity_objective_independent_of_matching(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((4, 2))
        a = optimal_decoder_objective(AssignmentProblem(z, np.eye(4), 1.0, rng.permutation(4)))[0]
        b = optimal_decoder_objective(AssignmentProblem(z, np.eye(4), 1.0, rng.permutation(4)))[0]
        assert abs(a - b) < 1e-6


class TestTheorem1:
    def test_two_items(self):
        rep = verify_theorem1(n=2, trials=3)
        assert rep["ok"] and all(r["matchings"] == 2 for r in rep["rows"])

    def test_regular_simplex_exact(self):
        z = np.array([[math.cos(a), math.sin(a)] for a in (0, 2 * math.pi / 3, 4 * math.pi / 3)])
        rep = verify_theorem1(n=3, trials=1, latents=z)
        assert rep["rows"][0]["relative_spread"] < 1e-8

    def test_rejects_large_n(self):
        with pytest.raises(ValueError):
            verify_theorem1(n=7)


class TestTheorem2:
    def test_named_point_condition_and_bounds(self):
        ok, _ = theorem2_condition(0.4, 2.0, 1.0)
        lower, upper = theorem2_bounds(0.4, 2.0, 1.0)
        assert ok
        assert lower == pytest.approx(-6.560, abs=1e-3)
        assert upper == pytest.approx(1.6 - 12 * math.log(2), abs=1e-12)

    @pytest.mark.parametrize("zeta", [1.0, 2.0, 5.0])
    def test_condition_forms_agree(self, zeta):
        assert theorem2_delta_max_halved(zeta, 1.0) == pytest.approx(theorem2_delta_max(zeta, 1.0), abs=1e-12)

    def test_bound_gap_widens_as_delta_shrinks(self):
        gaps = [theorem2_bounds(d, 2.0, 1.0)[0] - theorem2_bounds(d, 2.0, 1.0)[1] for d in (0.4, 0.2, 0.05)]
        assert gaps == sorted(gaps)

    def test_infeasible_points_skipped(self):
        rep = verify_theorem2([(0.1, 0.5), (0.6, 2.0)])
        assert rep["skipped"] == 2 and rep["pass"] == 0

    def test_grid_has_enough_feasible_points(self):
        feasible = [g for g in default_theorem2_grid() if theorem2_condition(*g, 1.0)[0]]
        assert (0.4, 2.0) in feasible and len(feasible) >= 9

    def test_four_point_layouts(self):
        inst = four_point_instances(0.4, 2.0, 1.0)
        d1, d2 = inst["case1"].distances(), inst["case2"].distances()
        assert d1[0, 1] == pytest.approx(0.4) and d1[2, 3] == pytest.approx(0.4)
        assert d1[0, 2] >= 2.0 and d2[0, 2] == pytest.approx(0.4)


class TestTheorem3:
    def test_single_cluster_bound(self):
        labels = np.zeros(4, dtype=int)
        assert theorem3_bound(np.random.default_rng(0).normal(size=(4, 2)), np.arange(4), labels, 1.0) == pytest.approx(-math.log(4))

    def test_equal_cross_distances(self):
        # clusters {0,1} and {2,3}; every cross pair at distance 2
        z = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
        val = theorem3_bound(z, np.arange(4), np.array([0, 0, 1, 1]), 1.0)
        assert val == pytest.approx(0.5 * math.log(1 / (1 + math.exp(-2))) - math.log(2), abs=1e-4)
        assert val == pytest.approx(-0.7566, abs=1e-4)

    def test_bound_grows_with_separation(self):
        labels = np.array([0, 0, 1, 1])
        base = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.1, 0.0]])
        far = base + np.array([[0, 0], [0, 0], [3, 0], [3, 0]])
        assert theorem3_bound(far, np.arange(4), labels, 1.0) > theorem3_bound(base, np.arange(4), labels, 1.0)

    def test_unequal_clusters(self):
        with pytest.raises(ValueError):
            theorem3_bound(np.zeros((3, 2)), np.arange(3), [0, 0, 1], 1.0)
        with pytest.raises(ValueError):
            cluster_perturbation(5, 2)

    def test_identity_perturbation_objective_is_non_positive(self):
        rep = verify_theorem3(n=4, K=1, trials=5)
        assert rep["ok"]
        assert all(r[f"{k}_objective"] <= 1e-12 for r in rep["rows"] for k in ("random", "separated", "mixed"))

    def test_partitions_are_exhaustive(self):
        parts = group_partitions(6, 2)
        assert len(parts) == 15
        assert all(sorted(i for g in p for i in g) == list(range(6)) for p in parts)

    def test_small_run(self):
        rep = verify_theorem3(trials=10, seed=1)
        assert rep["ok"] and rep["pass"] == 10
