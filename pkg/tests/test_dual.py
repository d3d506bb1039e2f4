import math

import numpy as np
import pytest

from helpers import E, m2_model, m2_problem, random_problem
from klq.dual import (
    KlqProblem,
    SolverError,
    SolverOptions,
    aggregate_g,
    backward_recursion,
    dual_functional_general,
    dual_gradient,
    dual_value,
    evaluate,
    golden_section_search,
    growth_constants,
    policy_from_multipliers,
    solve,
    tilt_operator,
)
from klq.relaxation import degenerate_basis

LOG_HALF_1PE = math.log((1 + E) / 2)  # two-term log-sum-exp with Y = u


def test_tilt_operator_m2():
    m = m2_model()
    assert np.allclose(tilt_operator(m, 1, 0.0, np.zeros(2)), 0.0)
    assert np.allclose(tilt_operator(m, 1, 1.0, np.zeros(2)), LOG_HALF_1PE)
    assert LOG_HALF_1PE == pytest.approx(0.620115, abs=1e-6)


def test_tilt_operator_constant_shift():
    rng = np.random.default_rng(0)
    p = random_problem(rng)
    f = rng.normal(size=p.model.num_states)
    base = tilt_operator(p.model, 1, 0.7, f)
    assert np.allclose(tilt_operator(p.model, 1, 0.7, f + 3.25), base + 3.25, atol=1e-12)


def test_tilt_operator_no_overflow():
    m = m2_model()
    out = tilt_operator(m, 1, 700.0, np.zeros(2))
    assert np.all(np.isfinite(out))
    assert out == pytest.approx(700 + math.log(0.5), rel=1e-12)


def test_backward_recursion_m2():
    g = backward_recursion(m2_model(), degenerate_basis(2), [1.0, 0.0])
    assert g.shape == (3, 2)
    assert np.allclose(g[0], LOG_HALF_1PE)
    assert np.allclose(g[1:], 0.0)
    assert np.array_equal(backward_recursion(m2_model(), degenerate_basis(2), [0.0, 0.0]), np.zeros((3, 2)))


def test_backward_recursion_matches_tilt_operator():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = random_problem(rng)
        lam = rng.normal(size=p.basis.size)
        g = backward_recursion(p.model, p.basis, lam)
        lamc = p.basis.expand(lam)
        for k in range(1, p.model.horizon + 1):
            assert np.allclose(g[k - 1], tilt_operator(p.model, k, lamc[k - 1], g[k]), atol=1e-10)


def test_growth_bound():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_problem(rng)
        lam = rng.normal(size=p.basis.size)
        lam *= 10 / np.linalg.norm(lam)
        g = backward_recursion(p.model, p.basis, lam)
        C = growth_constants(p.model, p.basis)
        assert np.all(np.abs(g[:-1]) <= C[:, None] * 10 + 1e-12)


def test_aggregate_g():
    m = m2_model()
    assert np.array_equal(aggregate_g(m, np.zeros(2)), np.zeros((2, 2)))
    assert np.allclose(aggregate_g(m, np.full(2, 1.5)), 1.5)
    G = aggregate_g(m, np.array([2.0, 5.0]))
    assert G[0, 1] == 5.0 and G[1, 1] == 2.0
    assert G[0, 0] == 2.0 and G[1, 0] == 5.0


def test_dual_value_m2():
    p = m2_problem()
    assert dual_value(p, [0.0, 0.0]) == 0.0
    assert dual_value(p, [1.0, 0.0]) == pytest.approx(0.7 - 0.5 - LOG_HALF_1PE, abs=1e-14)
    assert dual_value(p, [1.0, 0.0]) == pytest.approx(-0.420115, abs=1e-6)


def test_dual_concavity():
    rng = np.random.default_rng(3)
    p = random_problem(rng, max_states=4, max_horizon=5)
    for _ in range(100):
        a, b = rng.normal(scale=2, size=(2, p.basis.size))
        mid = dual_value(p, (a + b) / 2)
        assert mid >= (dual_value(p, a) + dual_value(p, b)) / 2 - 1e-10


def test_dual_functional_general():
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = random_problem(rng)
        lam = rng.normal(size=p.basis.size)
        g = backward_recursion(p.model, p.basis, lam)
        v = dual_value(p, lam)
        assert dual_functional_general(p, lam, g) == pytest.approx(v, abs=1e-12)
        bumped = g.copy()
        s = rng.integers(p.model.num_states)
        k = rng.integers(p.model.horizon)
        bumped[k, s] += abs(rng.normal()) + 0.1
        assert dual_functional_general(p, lam, bumped) <= v + 1e-12


def test_dual_functional_general_shape_errors():
    p = m2_problem()
    with pytest.raises(ValueError):
        dual_functional_general(p, [0, 0], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        dual_functional_general(p, [0, 0], np.ones((3, 2)))


def test_gradient_m2_at_zero():
    assert np.allclose(dual_gradient(m2_problem(), [0.0, 0.0]), [0.2, 0.2], atol=1e-15)


def test_gradient_finite_difference_random():
    rng = np.random.default_rng(5)
    p = random_problem(rng, max_states=5, max_horizon=6)
    h = 1e-5
    for _ in range(20):
        lam = rng.normal(size=p.basis.size)
        grad = dual_gradient(p, lam)
        fd = np.array(
            [(dual_value(p, lam + h * e) - dual_value(p, lam - h * e)) / (2 * h) for e in np.eye(p.basis.size)]
        )
        assert np.linalg.norm(fd - grad) <= 1e-6 * max(np.linalg.norm(grad), 1.0)


def test_policy_from_multipliers_m2():
    m = m2_model()
    b = degenerate_basis(2)
    assert np.allclose(policy_from_multipliers(m, b, [0, 0], np.zeros((3, 2)))[1:], 0.5)
    g = backward_recursion(m, b, [1.0, 0.0])
    phi = policy_from_multipliers(m, b, [1.0, 0.0], g)
    assert np.allclose(phi[1][:, 1], E / (1 + E))
    assert np.allclose(phi[2], 0.5)


def test_policy_rows_normalise_and_respect_support():
    rng = np.random.default_rng(6)
    for _ in range(100):
        p = random_problem(rng)
        lam = rng.normal(scale=2, size=p.basis.size)
        g = backward_recursion(p.model, p.basis, lam)
        phi = policy_from_multipliers(p.model, p.basis, lam, g)
        assert np.allclose(phi[1:].sum(axis=-1), 1.0, atol=1e-10)
        assert np.array_equal(phi[1:] > 0, p.model.nominal_policies[1:] > 0)


def test_policy_from_inconsistent_g_raises():
    m = m2_model()
    with pytest.raises(SolverError):
        policy_from_multipliers(m, degenerate_basis(2), [1.0, 0.0], np.zeros((3, 2)))


def test_golden_section():
    assert golden_section_search(lambda x: -((x - 1) ** 2), 0, 2, 1e-8) == pytest.approx(1, abs=1e-8)
    assert golden_section_search(lambda x: -abs(x - 0.3), 0, 1, 1e-8) == pytest.approx(0.3, abs=1e-8)
    assert golden_section_search(lambda x: x, 0, 1, 1e-8) == pytest.approx(1, abs=1e-8)
    assert golden_section_search(lambda x: -x, 0, 1, 1e-8) == pytest.approx(0, abs=1e-8)
    with pytest.raises(ValueError):
        golden_section_search(lambda x: x, 1, 0, 1e-8)
    with pytest.raises(ValueError):
        golden_section_search(lambda x: x, 0, 1, 0.0)


def test_solve_m2():
    sol = solve(m2_problem())
    assert sol.converged
    # both steps see the same nominal mean and reference, so the multipliers agree
    assert sol.lam[0] == pytest.approx(sol.lam[1], abs=1e-8)
    assert np.max(np.abs(sol.gradient)) <= 1e-8 * (1 + 0.7)
    assert sol.duality_gap <= 1e-6 * (1 + abs(sol.dual_value))
    assert np.allclose(sol.gamma, -sol.lam)


def test_solve_tiny_kappa_stays_nominal():
    p = m2_problem(kappa=1e-6)
    sol = solve(p)
    assert np.max(np.abs(sol.lam)) <= 1e-5
    assert np.allclose(sol.policies[1:], 0.5, atol=1e-4)
    # first-order oracle: lam ~ kappa (r_hat - y_hat_nominal)
    assert np.allclose(sol.lam, 1e-6 * 0.2, rtol=1e-3)


@pytest.mark.parametrize("direction", ["gradient", "cg", "lbfgs"])
def test_directions_agree(direction):
    rng = np.random.default_rng(7)
    p = random_problem(rng, max_states=4, max_horizon=6)
    ref = solve(p, SolverOptions(direction="lbfgs", grad_tol=1e-11))
    sol = solve(p, SolverOptions(direction=direction))
    assert sol.converged
    assert sol.dual_value == pytest.approx(ref.dual_value, abs=1e-9)


def test_iteration_exhaustion_is_soft():
    p = random_problem(np.random.default_rng(9), kappa=100.0, max_states=5, max_horizon=8)
    sol = solve(p, SolverOptions(max_iters=1))
    assert not sol.converged
    assert sol.iterations == 1
    assert "iteration limit" in sol.message


def test_unknown_direction():
    with pytest.raises(ValueError):
        solve(m2_problem(), SolverOptions(direction="newton"))


def test_solution_invariants():
    rng = np.random.default_rng(8)
    for _ in range(5):
        p = random_problem(rng)
        sol = solve(p)
        assert sol.duality_gap >= -1e-8
        assert np.allclose(sol.policies[1:].sum(axis=-1), 1, atol=1e-10)
        assert np.array_equal(sol.policies[1:] > 0, p.model.nominal_policies[1:] > 0)
        it = evaluate(p, sol.lam)
        assert np.allclose(it.output_means, sol.output_trajectory)


def test_problem_validation():
    m = m2_model()
    with pytest.raises(ValueError):
        KlqProblem(m, np.zeros(3), 1.0, degenerate_basis(2))
    with pytest.raises(ValueError):
        KlqProblem(m, np.zeros(2), 0.0, degenerate_basis(2))
    with pytest.raises(ValueError):
        KlqProblem(m, np.zeros(2), 1.0, degenerate_basis(3))
