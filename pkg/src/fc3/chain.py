"""Controller chains: implicit-constraint propagation, switching configurations,
waypoint sequence feasibility, and goal satisfaction.

Implicit constraints are back-propagated from chain position i+1 into i: the
successor's immediate constraints that fail at controller i's terminal
configuration become immediate constraints of controller i, seeded by the
goal constraint set at the chain end.  Sequence feasibility solves one
waypoint per remaining controller: each waypoint satisfies its controller's
full constraint set plus the successor's immediate set, held objects keep
their grasp offset between consecutive waypoints, and untouched objects keep
their pose.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from fc3 import nlp
from fc3.controller import (
    EPS_FEAS,
    TETHER_WEIGHT,
    Controller,
    evaluate_entries,
    logic_satisfied,
    solve_terminal,
)
from fc3.features import ConstraintSpec, EvalContext, evaluate, feature_dim, violation
from fc3.kinematics import KinematicState, Scene, effective_config, forward_kinematics

log = logging.getLogger("fc3.chain")

EPS_MARGIN = EPS_FEAS  # violation margin for implicit-constraint harvesting

# Waypoints are feasibility certificates: the verdict threshold is the
# feasibility epsilon, and the solver needs no more accuracy than that.
SEQUENCE_OPTIONS = nlp.Options(mu0=100.0, max_outer=10, max_inner=40, tol_feas=EPS_FEAS, tol_kkt=1e-4)


class ChainError(Exception):
    pass


@dataclass
class ControllerChain:
    controllers: list
    goal: tuple
    source: tuple = ()  # ground action names that produced the chain
    initial_holds: dict = field(default_factory=dict)  # grasp frame -> object at chain start
    diagnostics: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return " > ".join(self.source) if self.source else "<anonymous>"

    def __len__(self):
        return len(self.controllers)

    def phase_logic(self) -> list:
        """Expected holdings during each controller's phase (nominal fold)."""
        phases = []
        logic = dict(self.initial_holds)
        for ctrl in self.controllers:
            phases.append(dict(logic))
            logic = apply_signal_logic(ctrl.signal, logic)
        return phases


@dataclass
class SequenceFeasibilityResult:
    feasible: bool
    waypoints: list
    max_violation: float
    cost: float
    reason: str = ""


def apply_signal_logic(sig, logic: dict, strict: bool = False) -> dict:
    """Fold a discrete signal over a grasp-frame -> object map."""
    logic = dict(logic)
    if sig is None:
        return logic
    if sig.kind == "grasp":
        if strict and (sig.grasp_frame in logic or sig.obj in logic.values()):
            raise ChainError(f"grasp {sig.grasp_frame}:{sig.obj} not applicable")
        logic[sig.grasp_frame] = sig.obj
    elif sig.kind == "place":
        if strict and sig.grasp_frame not in logic:
            raise ChainError(f"place from empty {sig.grasp_frame}")
        logic.pop(sig.grasp_frame, None)
    elif sig.kind == "handover":
        if strict and logic.get(sig.grasp_frame) != sig.obj:
            raise ChainError(f"handover of {sig.obj} not held by {sig.grasp_frame}")
        logic.pop(sig.grasp_frame, None)
        logic[sig.to_frame] = sig.obj
    return logic


def goal_satisfied(goal, scene: Scene, state: KinematicState, eps: float = EPS_FEAS) -> bool:
    """F_I of the goal constraint set at the current configuration."""
    config = effective_config(scene, state)
    worst, _ = evaluate_entries(list(goal), scene, config, state.attachments)
    return worst <= eps


def propagate_implicit(chain: ControllerChain, scene: Scene, seed_config, terminal_cache=None):
    """Augment each controller with the successor constraints its own
    convergence does not establish (goal constraints seed the recursion)."""
    terminal_cache = terminal_cache if terminal_cache is not None else {}
    controllers = list(chain.controllers)
    n = len(controllers)
    skipped = []
    terminals = []
    for ctrl in controllers:
        key = ctrl.name
        if key not in terminal_cache:
            # Terminal configurations come from the base constraints so that
            # augmentation is idempotent across passes.
            terminal_cache[key] = solve_terminal(replace(ctrl, implicit=()), scene, seed_config)
        terminals.append(terminal_cache[key])
    for i in range(n - 1, -1, -1):
        x_i, ok = terminals[i]
        if not ok:
            skipped.append(controllers[i].name)
            continue
        if i + 1 < n:
            successor = controllers[i + 1].immediate_entries()
            source = controllers[i + 1].name
        else:
            successor = list(chain.goal)
            source = "goal"
        ctx = EvalContext(scene, attachments={})
        added = []
        existing = {_spec_key(s) for s in controllers[i].all_entries()}
        for spec in successor:
            if spec.feature.kind == "control_cost":
                continue
            value, _ = evaluate(spec.feature, ctx, x_i)
            if violation(spec, value) > EPS_MARGIN:
                candidate = replace(
                    spec, implicit_from=spec.implicit_from or source, transient_epsilon=None
                )
                if _spec_key(candidate) not in existing:
                    added.append(candidate)
                    existing.add(_spec_key(candidate))
        if added:
            controllers[i] = controllers[i].with_implicit(added)
    return replace(
        chain,
        controllers=controllers,
        diagnostics={**chain.diagnostics, "augmentation_skipped": skipped},
    )


def _spec_key(spec: ConstraintSpec):
    return (spec.feature, spec.comparator, spec.transient_epsilon, spec.hold_pair)


def switching_configuration(c1: Controller, c2: Controller, scene: Scene, seed):
    """Configuration where c1 has finally converged and c2 can be initiated."""
    seed = np.asarray(seed, dtype=float)
    holds = tuple(dict.fromkeys(c1.holds + c2.holds))
    probe = replace(
        c1,
        holds=holds,
        constraints=c1.constraints
        + tuple(s for s in c2.immediate_entries() if s.feature.kind != "control_cost"),
    )
    x_s, ok = solve_terminal(probe, scene, seed)
    if not ok:
        return x_s, False
    w1, _ = evaluate_entries(c1.all_entries() + c1.terminal_costs(), scene, x_s, {})
    w2, _ = evaluate_entries(c2.immediate_entries(), scene, x_s, {})
    return x_s, bool(w1 <= EPS_FEAS and w2 <= EPS_FEAS)


class _WaypointAssembler:
    """Stacked NLP over waypoint configurations x_{i..N} (x0 fixed)."""

    def __init__(self, scene: Scene, x0: np.ndarray, n_waypoints: int):
        self.scene = scene
        self.x0 = x0
        self.n = n_waypoints
        self.d = scene.dim
        self.problem = nlp.Problem(dim=self.n * self.d)
        self._fk_cache = {}

    def slot(self, k, xs):
        return xs[k * self.d : (k + 1) * self.d]

    def _fk(self, k, xs):
        key = (k, xs.tobytes())
        hit = self._fk_cache.get(key)
        if hit is None:
            if len(self._fk_cache) > 4 * self.n:
                self._fk_cache.clear()
            config = self.x0 if k < 0 else self.slot(k, xs)
            hit = forward_kinematics(self.scene, config)
            self._fk_cache[key] = hit
        return hit

    def add_feature(self, spec: ConstraintSpec, k: int, as_cost=False):
        scene = self.scene
        dim_out = feature_dim(spec.feature, scene)
        ctx = EvalContext(scene)

        def fn(xs):
            config = self.slot(k, xs)
            v, Jl = evaluate(spec.feature, ctx, config)
            J = np.zeros((dim_out, self.problem.dim))
            J[:, k * self.d : (k + 1) * self.d] = Jl
            return v, J

        ev = nlp.Evaluator(fn, dim_out, f"{spec.name()}@{k}")
        if as_cost:
            self.problem.residuals.append((ev, spec.weight))
        elif spec.comparator == "eq":
            self.problem.eq.append(ev)
        else:
            self.problem.ineq.append(ev)

    def add_pose_tie(self, obj: str, k: int):
        """Object keeps its pose between waypoint k-1 (or x0) and waypoint k."""
        start, nspan = self.scene.span(obj)
        if nspan == 0:
            return

        def fn(xs):
            cur = self.slot(k, xs)[start : start + nspan]
            prev = (self.x0 if k == 0 else self.slot(k - 1, xs))[start : start + nspan]
            J = np.zeros((nspan, self.problem.dim))
            cols = k * self.d + start
            J[np.arange(nspan), np.arange(cols, cols + nspan)] = 1.0
            if k > 0:
                pcols = (k - 1) * self.d + start
                J[np.arange(nspan), np.arange(pcols, pcols + nspan)] = -1.0
            return cur - prev, J

        self.problem.eq.append(nlp.Evaluator(fn, nspan, f"tie:{obj}@{k}"))

    def add_hold_consistency(self, grasp: str, obj: str, k: int):
        """Grasp offset between grasp frame and object equal at waypoints k-1, k."""
        scene = self.scene

        def rel_and_jac(kk, xs):
            fk = self._fk(kk, xs)
            pg = fk.poses[grasp]
            po = fk.poses[obj]
            c, s = math.cos(pg[2]), math.sin(pg[2])
            ex, ey = po[0] - pg[0], po[1] - pg[1]
            rel = np.array([c * ex + s * ey, -s * ex + c * ey, po[2] - pg[2]])
            if kk < 0:
                return rel, None
            Jpo = fk.position_jacobian(obj, self.d)
            Jpg = fk.position_jacobian(grasp, self.d)
            Jto = fk.orientation_jacobian(obj, self.d)
            Jtg = fk.orientation_jacobian(grasp, self.d)
            Rm = np.array([[c, s], [-s, c]])
            dR = np.array([[-s, c], [-c, -s]])
            Jp = Rm @ (Jpo - Jpg) + np.outer(dR @ np.array([ex, ey]), Jtg[0])
            return rel, np.vstack([Jp, Jto - Jtg])

        def fn(xs):
            rel_k, J_k = rel_and_jac(k, xs)
            rel_p, J_p = rel_and_jac(k - 1 if k > 0 else -1, xs)
            J = np.zeros((3, self.problem.dim))
            J[:, k * self.d : (k + 1) * self.d] = J_k
            if k > 0:
                J[:, (k - 1) * self.d : k * self.d] = -J_p
            v = rel_k - rel_p
            v[2] = math.remainder(v[2], 2.0 * math.pi)
            return v, J

        self.problem.eq.append(nlp.Evaluator(fn, 3, f"hold:{grasp}:{obj}@{k}"))

    def add_tether(self, seed: np.ndarray):
        def fn(xs):
            return xs - seed, np.eye(self.problem.dim)

        self.problem.residuals.append((nlp.Evaluator(fn, self.problem.dim, "tether"), TETHER_WEIGHT))


def sequence_feasible(
    chain: ControllerChain,
    from_index: int,
    scene: Scene,
    state: KinematicState,
    seed_waypoints=None,
) -> SequenceFeasibilityResult:
    """Feasibility of the remaining chain (1-based from_index) plus the goal.

    The current configuration is waypoint x0 and stays fixed; one decision
    waypoint per remaining controller.  Held objects are coupled to their
    grasp frame by offset consistency across consecutive waypoints; objects
    not manipulated during a phase keep their pose.
    """
    n = len(chain.controllers)
    if not 1 <= from_index <= n + 1:
        raise ChainError(f"from_index {from_index} out of range 1..{n + 1}")
    t_start = time.perf_counter()
    x0 = effective_config(scene, state)
    remaining = chain.controllers[from_index - 1 :]

    # Logic applicability: fold the current holdings through the remaining
    # signals; a mismatch means the chain cannot run from this state.
    logic = {a.parent: obj for obj, a in state.attachments.items()}
    held_per_phase = []
    for ctrl in remaining:
        if not logic_satisfied(ctrl.precondition, logic):
            return SequenceFeasibilityResult(
                False, [x0], 0.0, 0.0, reason=f"logic:{ctrl.name}"
            )
        held_per_phase.append(dict(logic))
        try:
            logic = apply_signal_logic(ctrl.signal, logic, strict=True)
        except ChainError as e:
            return SequenceFeasibilityResult(False, [x0], 0.0, 0.0, reason=str(e))

    # The first controller must be immediately initiable at x0.
    if remaining:
        w0, bad0 = evaluate_entries(
            remaining[0].immediate_entries(), scene, x0, state.attachments
        )
        if w0 > EPS_FEAS:
            return SequenceFeasibilityResult(
                False, [x0], w0, 0.0, reason=f"entry:{';'.join(bad0)}"
            )
    else:
        worst, bad = evaluate_entries(list(chain.goal), scene, x0, state.attachments)
        return SequenceFeasibilityResult(worst <= EPS_FEAS, [x0], worst, 0.0)

    free_objects = scene.free_frames
    asm = _WaypointAssembler(scene, x0, len(remaining))
    for j, ctrl in enumerate(remaining):
        held = held_per_phase[j]
        for spec in ctrl.all_entries():
            if spec.feature.kind == "control_cost" or spec.hold_pair is not None:
                continue
            asm.add_feature(spec, j)
        for spec in ctrl.terminal_costs():
            asm.add_feature(spec, j, as_cost=True)
        successor = (
            chain.controllers[from_index - 1 + j + 1].immediate_entries()
            if from_index + j < n
            else list(chain.goal)
        )
        for spec in successor:
            if spec.feature.kind == "control_cost" or spec.hold_pair is not None:
                continue
            asm.add_feature(spec, j)
        held_objs = set(held.values())
        for grasp, obj in held.items():
            asm.add_hold_consistency(grasp, obj, j)
        for obj in free_objects:
            if obj not in held_objs:
                asm.add_pose_tie(obj, j)

    if seed_waypoints is not None and len(seed_waypoints) == len(remaining):
        seed = np.concatenate(seed_waypoints)
    else:
        seed = np.tile(x0, len(remaining))
    asm.add_tether(seed)
    lo = np.full(asm.problem.dim, -np.inf)
    hi = np.full(asm.problem.dim, np.inf)
    for name in scene.order:
        f = scene.frames[name]
        if f.joint == "revolute" and f.limits:
            i = scene.layout[name][0]
            for k in range(len(remaining)):
                lo[k * scene.dim + i], hi[k * scene.dim + i] = f.limits
    asm.problem.bounds = (lo, hi)
    sol = nlp.solve(asm.problem, seed, SEQUENCE_OPTIONS)
    waypoints = [x0] + [sol.x[k * scene.dim : (k + 1) * scene.dim] for k in range(len(remaining))]
    feasible = bool(sol.max_violation <= EPS_FEAS)
    log.debug(
        "sequence_feasible chain=%s from=%d feasible=%s max_violation=%.2e solve_s=%.4f",
        chain.id,
        from_index,
        feasible,
        sol.max_violation,
        time.perf_counter() - t_start,
    )
    return SequenceFeasibilityResult(feasible, waypoints, sol.max_violation, sol.objective)
