"""Constrained nonlinear least squares: Augmented Lagrangian + Gauss-Newton.

Inequalities use the shifted-penalty form mu*max(0, g + lam/(2mu))^2 with
multiplier update lam <- max(0, lam + 2 mu g); equalities use the symmetric
term lam^T h + mu ||h||^2.  The inner loop is Gauss-Newton on the stacked
residual with Levenberg damping and Armijo backtracking.  Everything is
deterministic: identical inputs produce identical iterate sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NlpNumericError(Exception):
    """An evaluator produced NaN or infinity."""


@dataclass
class Evaluator:
    """Callable term: fn(x) -> (value vector (d,), jacobian (d, n))."""

    fn: object
    dim: int
    label: str = ""

    def __call__(self, x):
        v, J = self.fn(x)
        # One reduction instead of elementwise isfinite: NaN propagates
        # through the sum, and +inf/-inf cancellation yields NaN as well.
        if v.size and not math.isfinite(float(v.sum()) + float(J.sum())):
            raise NlpNumericError(f"non-finite value in term {self.label!r}")
        return v, J


def linear_evaluator(A, b, label=""):
    """Evaluator for A x - b."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    return Evaluator(lambda x: (A @ x - b, A), dim=A.shape[0], label=label)


@dataclass
class Problem:
    dim: int
    residuals: list = field(default_factory=list)  # (Evaluator, weight)
    eq: list = field(default_factory=list)
    ineq: list = field(default_factory=list)
    bounds: tuple | None = None  # (lo, hi) arrays with +-inf for unbounded


@dataclass
class Options:
    tol_feas: float = 1e-4
    tol_kkt: float = 1e-5
    max_outer: int = 20
    max_inner: int = 50
    mu0: float = 1.0
    mu_growth: float = 5.0
    armijo: float = 0.01


@dataclass
class Solution:
    x: np.ndarray
    feasible: bool
    max_violation: float
    kkt_residual: float
    iterations: tuple
    objective: float


@dataclass
class Multipliers:
    lam_eq: list
    lam_ineq: list
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    mu: float


def _init_multipliers(problem: Problem, mu: float) -> Multipliers:
    n = problem.dim
    return Multipliers(
        lam_eq=[np.zeros(ev.dim) for ev in problem.eq],
        lam_ineq=[np.zeros(ev.dim) for ev in problem.ineq],
        lam_lo=np.zeros(n),
        lam_hi=np.zeros(n),
        mu=mu,
    )


def _stack(problem: Problem, x: np.ndarray, m: Multipliers):
    """Stacked residual/Jacobian of the augmented objective at x."""
    rows, jacs = [], []
    for ev, w in problem.residuals:
        v, J = ev(x)
        sw = np.sqrt(w)
        rows.append(sw * v)
        jacs.append(sw * J)
    smu = np.sqrt(m.mu)
    for ev, lam in zip(problem.eq, m.lam_eq):
        v, J = ev(x)
        rows.append(smu * v + lam / (2.0 * smu))
        jacs.append(smu * J)
    for ev, lam in zip(problem.ineq, m.lam_ineq):
        v, J = ev(x)
        shifted = v + lam / (2.0 * m.mu)
        active = shifted > 0.0
        r = np.where(active, smu * shifted, 0.0)
        rows.append(r)
        jacs.append(smu * J * active[:, None])
    if problem.bounds is not None:
        lo, hi = problem.bounds
        for bound, lam, sign in ((lo, m.lam_lo, -1.0), (hi, m.lam_hi, 1.0)):
            idx = np.flatnonzero(np.isfinite(bound))
            if idx.size == 0:
                continue
            g = sign * (x[idx] - bound[idx])
            shifted = g + lam[idx] / (2.0 * m.mu)
            active = shifted > 0.0
            rows.append(np.where(active, smu * shifted, 0.0))
            J = np.zeros((idx.size, problem.dim))
            J[np.arange(idx.size), idx] = sign * smu * active
            jacs.append(J)
    if rows:
        return np.concatenate(rows), np.vstack(jacs)
    return np.zeros(0), np.zeros((0, problem.dim))


def _constraint_values(problem: Problem, x: np.ndarray):
    eq_vals = [ev(x)[0] for ev in problem.eq]
    ineq_vals = [ev(x)[0] for ev in problem.ineq]
    vio = 0.0
    for v in eq_vals:
        if v.size:
            vio = max(vio, float(np.max(np.abs(v))))
    for v in ineq_vals:
        if v.size:
            vio = max(vio, float(max(np.max(v), 0.0)))
    if problem.bounds is not None:
        lo, hi = problem.bounds
        with np.errstate(invalid="ignore"):
            vio = max(vio, float(np.max(np.maximum(np.where(np.isfinite(lo), lo - x, 0.0), 0.0), initial=0.0)))
            vio = max(vio, float(np.max(np.maximum(np.where(np.isfinite(hi), x - hi, 0.0), 0.0), initial=0.0)))
    return eq_vals, ineq_vals, vio


def _objective(problem: Problem, x: np.ndarray) -> float:
    total = 0.0
    for ev, w in problem.residuals:
        v, _ = ev(x)
        total += w * float(v @ v)
    return total


def newton_step(problem: Problem, x: np.ndarray, multipliers: Multipliers | None = None) -> np.ndarray:
    """Gauss-Newton direction of the augmented objective.

    For a pure least-squares problem with linear residuals a single step
    lands on the (minimum-norm) least-squares optimum.
    """
    if multipliers is None:
        multipliers = _init_multipliers(problem, mu=1.0)
    r, J = _stack(problem, x, multipliers)
    if r.size == 0:
        return np.zeros(problem.dim)
    try:
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
    except np.linalg.LinAlgError:
        damped = np.vstack([J, np.sqrt(1e-8) * np.eye(problem.dim)])
        rhs = np.concatenate([-r, np.zeros(problem.dim)])
        step, *_ = np.linalg.lstsq(damped, rhs, rcond=None)
    return step


def _inner_minimize(problem, x, m, opts):
    """Gauss-Newton descent on the augmented objective from x."""
    iters = 0
    damping = 0.0
    for _ in range(opts.max_inner):
        r, J = _stack(problem, x, m)
        f0 = float(r @ r)
        grad = 2.0 * J.T @ r
        if np.max(np.abs(grad), initial=0.0) <= 0.5 * opts.tol_kkt:
            break
        if damping > 0.0:
            Jd = np.vstack([J, np.sqrt(damping) * np.eye(problem.dim)])
            rd = np.concatenate([-r, np.zeros(problem.dim)])
            step, *_ = np.linalg.lstsq(Jd, rd, rcond=None)
        else:
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        iters += 1
        slope = float(grad @ step)
        if slope > -1e-16 * max(f0, 1.0):
            break  # no useful descent direction left
        alpha = 1.0
        accepted = False
        f_try = f0
        while alpha >= 1e-10:
            x_try = x + alpha * step
            r_try, _ = _stack(problem, x_try, m)
            f_try = float(r_try @ r_try)
            if f_try <= f0 + opts.armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if damping == 0.0:
                damping = 1e-6
            else:
                damping *= 10.0
            if damping > 1e8:
                break
            continue
        damping = max(damping * 0.1, 0.0) if damping > 1e-10 else 0.0
        x = x_try
        if np.max(np.abs(alpha * step), initial=0.0) <= 1e-12:
            break
        if f0 - f_try <= 1e-12 * max(f0, 1.0):
            break  # progress stalled at float resolution
    return x, iters


def solve(problem: Problem, x_init: np.ndarray, options: Options | None = None) -> Solution:
    """Solve the constrained nonlinear least-squares problem."""
    opts = options or Options()
    x = np.asarray(x_init, dtype=float).copy()
    if x.shape != (problem.dim,):
        raise ValueError(f"x_init has shape {x.shape}, problem dim is {problem.dim}")
    m = _init_multipliers(problem, opts.mu0)
    prev_vio = np.inf
    total_inner = 0
    outer = 0
    stagnant = 0
    for outer in range(1, opts.max_outer + 1):
        x, inner = _inner_minimize(problem, x, m, opts)
        total_inner += inner
        eq_vals, ineq_vals, vio = _constraint_values(problem, x)
        r, J = _stack(problem, x, m)
        kkt = float(np.max(np.abs(2.0 * J.T @ r), initial=0.0))
        if vio <= opts.tol_feas and kkt <= opts.tol_kkt:
            break
        # Deep geometric infeasibility shows as a large violation plateau
        # that penalty growth cannot move; feasible-but-ill-conditioned
        # problems keep improving as mu grows, resetting the counter.
        if vio > 1e-2 and vio > 0.7 * prev_vio and m.mu >= 125.0 * opts.mu0:
            stagnant += 1
            if stagnant >= 3:
                break
        else:
            stagnant = 0
        for lam, v in zip(m.lam_eq, eq_vals):
            lam += 2.0 * m.mu * v
        for lam, v in zip(m.lam_ineq, ineq_vals):
            np.copyto(lam, np.maximum(0.0, lam + 2.0 * m.mu * v))
        if problem.bounds is not None:
            lo, hi = problem.bounds
            g_lo = np.where(np.isfinite(lo), lo - x, -np.inf)
            g_hi = np.where(np.isfinite(hi), x - hi, -np.inf)
            m.lam_lo = np.maximum(0.0, m.lam_lo + 2.0 * m.mu * np.where(np.isfinite(g_lo), g_lo, 0.0))
            m.lam_hi = np.maximum(0.0, m.lam_hi + 2.0 * m.mu * np.where(np.isfinite(g_hi), g_hi, 0.0))
        if vio > opts.tol_feas and vio > 0.5 * prev_vio:
            m.mu *= opts.mu_growth
        prev_vio = vio
    eq_vals, ineq_vals, vio = _constraint_values(problem, x)
    r, J = _stack(problem, x, m)
    kkt = float(np.max(np.abs(2.0 * J.T @ r), initial=0.0))
    return Solution(
        x=x,
        feasible=bool(vio <= opts.tol_feas),
        max_violation=vio,
        kkt_residual=kkt,
        iterations=(outer, total_inner),
        objective=_objective(problem, x),
    )
