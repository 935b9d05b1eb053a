import numpy as np
import pytest

from fc3.nlp import (
    Evaluator,
    NlpNumericError,
    Options,
    Problem,
    Solution,
    linear_evaluator,
    newton_step,
    solve,
)


TIGHT = Options(tol_feas=1e-8, max_outer=40)


def quad_residual(center):
    center = np.asarray(center, dtype=float)

    def fn(x):
        return x - center, np.eye(x.size)

    return Evaluator(fn, dim=center.size, label="quad")


def test_scalar_bound_active():
    # min (x-2)^2 s.t. x <= 1  ->  x* = 1
    p = Problem(dim=1, residuals=[(quad_residual([2.0]), 1.0)])
    p.ineq.append(linear_evaluator([[1.0]], [1.0], label="x<=1"))
    sol = solve(p, np.array([0.0]))
    assert sol.feasible
    assert np.isclose(sol.x[0], 1.0, atol=1e-4)


def test_minimum_norm_solution_matches_pseudoinverse():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(3, 6))
    b = rng.normal(size=3)
    p = Problem(dim=6, residuals=[(quad_residual(np.zeros(6)), 1.0)])
    p.eq.append(linear_evaluator(A, b, label="Ax=b"))
    sol = solve(p, np.zeros(6), TIGHT)
    oracle = np.linalg.pinv(A) @ b
    assert sol.feasible
    assert np.max(np.abs(sol.x - oracle)) < 1e-6


def test_contradictory_constraints_report_infeasible():
    # x <= 0 and x >= 1 jointly: empty feasible set.
    p = Problem(dim=1, residuals=[(quad_residual([0.5]), 1.0)])
    p.ineq.append(linear_evaluator([[1.0]], [0.0], label="x<=0"))
    p.ineq.append(linear_evaluator([[-1.0]], [-1.0], label="x>=1"))
    sol = solve(p, np.array([0.2]))
    assert not sol.feasible
    assert sol.max_violation >= 0.5 - 1e-6


def test_budget_exhaustion_returns_diagnostics_not_crash():
    p = Problem(dim=1, residuals=[(quad_residual([0.0]), 1.0)])
    p.ineq.append(linear_evaluator([[1.0]], [-1.0], label="x<=-1"))
    p.ineq.append(linear_evaluator([[-1.0]], [-1.0], label="x>=1"))
    sol = solve(p, np.array([0.0]), Options(max_outer=2, max_inner=5))
    assert isinstance(sol, Solution)
    assert not sol.feasible


def test_nan_raises_structured_error():
    def bad(x):
        return np.array([np.nan]), np.ones((1, 1))

    p = Problem(dim=1, residuals=[(Evaluator(bad, 1, "bad"), 1.0)])
    with pytest.raises(NlpNumericError):
        solve(p, np.zeros(1))


class TestNewtonStep:
    def test_linear_residual_single_step_is_least_squares(self):
        rng = np.random.default_rng(11)
        J = rng.normal(size=(5, 3))
        y = rng.normal(size=5)
        p = Problem(dim=3, residuals=[(linear_evaluator(J, y), 1.0)])
        x0 = np.zeros(3)
        step = newton_step(p, x0)
        oracle = np.linalg.solve(J.T @ J, J.T @ y)
        assert np.max(np.abs(step - oracle)) < 1e-10

    def test_zero_residual_zero_step(self):
        p = Problem(dim=2, residuals=[(quad_residual([0.0, 0.0]), 1.0)])
        step = newton_step(p, np.zeros(2))
        assert np.allclose(step, 0.0)

    def test_underdetermined_gives_pseudoinverse_direction(self):
        # Endeffector-style cost: fewer residual rows than DOFs; the first
        # step must equal the operational-space/pseudo-inverse direction.
        rng = np.random.default_rng(3)
        J = rng.normal(size=(2, 6))
        phi = rng.normal(size=2)
        p = Problem(dim=6, residuals=[(linear_evaluator(J, -phi), 1.0)])
        step = newton_step(p, np.zeros(6))
        oracle = -np.linalg.pinv(J) @ phi
        assert np.max(np.abs(step - oracle)) < 1e-8


def _solve_box_qp_closed_form(center, lo, hi):
    return np.clip(center, lo, hi)


def test_regression_suite_against_oracles():
    """20 random convex QPs: 10 box-constrained (clamp oracle), 10
    equality-constrained (KKT oracle).  feasible, kkt < 1e-5, match 1e-6."""
    rng = np.random.default_rng(2024)
    for k in range(10):
        n = rng.integers(2, 6)
        center = rng.uniform(-2, 2, n)
        lo = rng.uniform(-1.5, -0.2, n)
        hi = rng.uniform(0.2, 1.5, n)
        p = Problem(dim=int(n), residuals=[(quad_residual(center), 1.0)], bounds=(lo, hi))
        sol = solve(p, np.zeros(int(n)), TIGHT)
        oracle = _solve_box_qp_closed_form(center, lo, hi)
        assert sol.feasible, f"box case {k}"
        assert sol.kkt_residual < 1e-5
        assert np.max(np.abs(sol.x - oracle)) < 1e-6, f"box case {k}"
    for k in range(10):
        n = int(rng.integers(3, 7))
        m = int(rng.integers(1, n))
        center = rng.uniform(-2, 2, n)
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m)
        p = Problem(dim=n, residuals=[(quad_residual(center), 1.0)])
        p.eq.append(linear_evaluator(A, b))
        sol = solve(p, np.zeros(n), TIGHT)
        # KKT system for min ||x-c||^2 s.t. Ax=b.
        K = np.block([[2 * np.eye(n), A.T], [A, np.zeros((m, m))]])
        rhs = np.concatenate([2 * center, b])
        oracle = np.linalg.solve(K, rhs)[:n]
        assert sol.feasible, f"eq case {k}"
        assert sol.kkt_residual < 1e-5
        assert np.max(np.abs(sol.x - oracle)) < 1e-6, f"eq case {k}"


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(2, 4))
    b = rng.normal(size=2)

    def run():
        p = Problem(dim=4, residuals=[(quad_residual(rng_center), 1.0)])
        p.eq.append(linear_evaluator(A, b))
        p.ineq.append(linear_evaluator(np.eye(4), np.full(4, 0.8)))
        return solve(p, np.zeros(4))

    rng_center = np.array([0.3, -0.4, 1.2, 0.0])
    s1, s2 = run(), run()
    assert s1.x.tobytes() == s2.x.tobytes()
    assert s1.iterations == s2.iterations
    assert s1.kkt_residual == s2.kkt_residual


def _grid_feasible(evals, lo, hi, n=101):
    xs = np.linspace(lo, hi, n)
    ys = np.linspace(lo, hi, n)
    for x in xs:
        for y in ys:
            pt = np.array([x, y])
            if all(np.all(ev(pt)[0] <= 1e-9) for ev in evals):
                return True
    return False


def test_infeasibility_agrees_with_grid_certification():
    """Infeasible verdicts are trustworthy: on 2-DoF problems certified
    infeasible by grid enumeration the solver must also report infeasible,
    and grid-feasible problems must come back feasible."""
    rng = np.random.default_rng(77)
    for _ in range(10):
        c1 = rng.uniform(-0.5, 0.5, 2)
        c2 = rng.uniform(-0.5, 0.5, 2)
        r = 0.3
        # Two disks of radius r around c1, c2: feasible iff they intersect.
        def disk(c):
            def fn(x, c=c):
                d = x - c
                return np.array([d @ d - r * r]), (2 * d).reshape(1, 2)

            return Evaluator(fn, 1)

        evals = [disk(c1), disk(c2)]
        p = Problem(dim=2, residuals=[(quad_residual(np.zeros(2)), 1e-2)], ineq=list(evals))
        sol = solve(p, np.array([1.3, 1.1]))
        grid = _grid_feasible(evals, -1.5, 1.5)
        if not grid:
            assert not sol.feasible
        else:
            assert sol.feasible
