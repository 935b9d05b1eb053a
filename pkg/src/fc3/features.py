"""Differentiable features over configurations, constraint specs, transient clipping.

Every feature kind evaluates to (value, jacobian) with the Jacobian taken with
respect to the decision configuration only; the previous state enters as data.
Transient constraints are tracked toward zero at a capped feature-space
velocity: per control step the scheduled error shrinks by at most tau*eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fc3.kinematics import FkResult, Scene, forward_kinematics, rot, wrap_angle


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class Feature:
    kind: str
    frame_a: str | None = None
    frame_b: str | None = None
    target: tuple = ()
    margin: float = 0.0
    alpha: float = 1.0

    KINDS = (
        "position_diff",
        "distance",
        "alignment",
        "joint_limits",
        "control_cost",
        "pose_equality",
        "zero_velocity",
    )


@dataclass(frozen=True)
class ConstraintSpec:
    """A feature with comparator and optional transient velocity.

    transient_epsilon absent means the constraint is immediate.  hold_pair
    marks a grasp coupling (grasp frame, object): at runtime it is satisfied
    by the attachment itself, in planning NLPs it is a geometric equality.
    """

    feature: Feature
    comparator: str = "eq"  # eq | ineq (<= 0)
    transient_epsilon: float | None = None
    weight: float = 1.0
    label: str = ""
    hold_pair: tuple | None = None
    implicit_from: str | None = None

    def __post_init__(self):
        if self.comparator not in ("eq", "ineq"):
            raise FeatureError(f"bad comparator {self.comparator!r}")
        if self.transient_epsilon is not None and not self.transient_epsilon > 0:
            raise FeatureError("transient_epsilon must be > 0 when present")

    @property
    def immediate(self) -> bool:
        return self.transient_epsilon is None

    def name(self) -> str:
        if self.label:
            return self.label
        f = self.feature
        parts = [f.kind, f.frame_a or "", f.frame_b or ""]
        return ":".join(p for p in parts if p)


def violation(spec: ConstraintSpec, value: np.ndarray) -> float:
    """Scalar violation of a constraint value: 0 means satisfied."""
    v = np.asarray(value, dtype=float)
    if v.size == 0:
        return 0.0
    if spec.comparator == "eq":
        return float(np.max(np.abs(v)))
    return float(max(np.max(v), 0.0))


class EvalContext:
    """Shared data for feature evaluation: scene, attachments, previous state."""

    def __init__(self, scene: Scene, attachments=None, prev_config=None, prev_velocity=None, tau=0.02):
        self.scene = scene
        self.attachments = attachments or {}
        self.prev_config = prev_config
        self.prev_velocity = prev_velocity
        self.tau = tau
        self._fk_key = None
        self._fk_val: FkResult | None = None
        self._fk_prev: FkResult | None = None

    def fk(self, config: np.ndarray) -> FkResult:
        key = config.tobytes()
        if key != self._fk_key:
            self._fk_val = forward_kinematics(self.scene, config, self.attachments)
            self._fk_key = key
        return self._fk_val

    def fk_prev(self) -> FkResult:
        if self._fk_prev is None:
            self._fk_prev = forward_kinematics(self.scene, self.prev_config, self.attachments)
        return self._fk_prev


def feature_dim(feature: Feature, scene: Scene) -> int:
    k = feature.kind
    if k == "position_diff":
        return 2
    if k in ("distance", "alignment"):
        return 1
    if k == "joint_limits":
        return 2 * sum(1 for f in scene.frames.values() if f.joint == "revolute" and f.limits)
    if k == "control_cost":
        return len(scene.actuated)
    if k in ("pose_equality", "zero_velocity"):
        return 3
    raise FeatureError(f"unknown feature kind {k!r}")


def evaluate(feature: Feature, ctx: EvalContext, config: np.ndarray):
    """Value and Jacobian of a feature at the decision configuration."""
    scene = ctx.scene
    k = feature.kind
    dim = scene.dim

    if k in ("control_cost", "zero_velocity") and ctx.prev_config is None:
        raise FeatureError(f"{k} requires the previous state")

    if k == "control_cost":
        act = scene.actuated
        a = feature.alpha / ctx.tau
        vel = ctx.prev_velocity if ctx.prev_velocity is not None else np.zeros(dim)
        value = a * (config[act] - ctx.prev_config[act] - ctx.tau * vel[act])
        J = np.zeros((len(act), dim))
        J[np.arange(len(act)), act] = a
        return value, J

    if k == "joint_limits":
        rows = []
        Jr = []
        for name in scene.order:
            f = scene.frames[name]
            if f.joint == "revolute" and f.limits:
                i = scene.layout[name][0]
                lo, hi = f.limits
                q = config[i]
                r1 = np.zeros(dim)
                r1[i] = -1.0
                rows.append(lo - q)
                Jr.append(r1)
                r2 = np.zeros(dim)
                r2[i] = 1.0
                rows.append(q - hi)
                Jr.append(r2)
        return np.array(rows), np.array(Jr) if Jr else np.zeros((0, dim))

    fk = ctx.fk(config)

    if k == "position_diff":
        pa = fk.poses[feature.frame_a]
        Ja = fk.position_jacobian(feature.frame_a, dim)
        ux, uy = feature.target if feature.target else (0.0, 0.0)
        if feature.frame_b is None:
            return np.array([pa[0] - ux, pa[1] - uy]), Ja
        pb = fk.poses[feature.frame_b]
        tb = pb[2]
        Jb = fk.position_jacobian(feature.frame_b, dim)
        Jtb = fk.orientation_jacobian(feature.frame_b, dim)
        c, s = math.cos(tb), math.sin(tb)
        value = np.array([pa[0] - pb[0] - (c * ux - s * uy), pa[1] - pb[1] - (s * ux + c * uy)])
        dR_u = np.array([-s * ux - c * uy, c * ux - s * uy])
        J = Ja - Jb - np.outer(dR_u, Jtb[0])
        return value, J

    if k == "distance":
        pa = fk.poses[feature.frame_a]
        pb = fk.poses[feature.frame_b]
        d = np.array([pa[0] - pb[0], pa[1] - pb[1]])
        n = math.hypot(d[0], d[1])
        ra = scene.frames[feature.frame_a].shape.radius
        rb = scene.frames[feature.frame_b].shape.radius
        value = np.array([n - ra - rb - feature.margin])
        unit = d / max(n, 1e-9)
        J = unit @ (fk.position_jacobian(feature.frame_a, dim) - fk.position_jacobian(feature.frame_b, dim))
        return value, J.reshape(1, dim)

    if k == "alignment":
        ta = fk.poses[feature.frame_a][2]
        Ja = fk.orientation_jacobian(feature.frame_a, dim)
        goal = float(feature.target[0]) if feature.target else 0.0
        if feature.frame_b is None:
            return np.array([wrap_angle(ta - goal)]), Ja
        tb = fk.poses[feature.frame_b][2]
        Jb = fk.orientation_jacobian(feature.frame_b, dim)
        return np.array([wrap_angle(ta - tb - goal)]), Ja - Jb

    if k == "pose_equality":
        pa = fk.poses[feature.frame_a]
        pb = fk.poses[feature.frame_b]
        value = np.array([pa[0] - pb[0], pa[1] - pb[1], wrap_angle(pa[2] - pb[2])])
        J = np.vstack(
            [
                fk.position_jacobian(feature.frame_a, dim) - fk.position_jacobian(feature.frame_b, dim),
                fk.orientation_jacobian(feature.frame_a, dim) - fk.orientation_jacobian(feature.frame_b, dim),
            ]
        )
        return value, J

    if k == "zero_velocity":
        pa = fk.poses[feature.frame_a]
        pp = ctx.fk_prev().poses[feature.frame_a]
        value = np.array([pa[0] - pp[0], pa[1] - pp[1], wrap_angle(pa[2] - pp[2])]) / ctx.tau
        J = np.vstack(
            [
                fk.position_jacobian(feature.frame_a, dim),
                fk.orientation_jacobian(feature.frame_a, dim),
            ]
        ) / ctx.tau
        return value, J

    raise FeatureError(f"unknown feature kind {k!r}")


@dataclass
class TransientTracker:
    """Open-loop error schedule captured at controller entry.

    The scheduled remaining error after k steps is max(|a| - k*budget, 0)
    along the entry-error direction; clipping shifts the feature so its zero
    set is the scheduled point.
    """

    initial_error: np.ndarray
    budget: float  # tau * epsilon, in feature units per step
    steps: int = 0

    def __post_init__(self):
        if not self.budget > 0:
            raise FeatureError("transient budget must be > 0")
        self.initial_error = np.asarray(self.initial_error, dtype=float)

    def advance(self):
        self.steps += 1

    def scheduled_target(self) -> np.ndarray:
        norm = float(np.linalg.norm(self.initial_error))
        if norm == 0.0:
            return np.zeros_like(self.initial_error)
        remaining = max(norm - self.steps * self.budget, 0.0)
        return self.initial_error * (remaining / norm)

    def steps_to_zero(self) -> int:
        norm = float(np.linalg.norm(self.initial_error))
        return int(math.ceil(norm / self.budget)) if norm > 0 else 0


def clip_transient(tracker: TransientTracker, feature_value: np.ndarray) -> np.ndarray:
    """Shifted feature value whose zero set is the current scheduled target."""
    return np.asarray(feature_value, dtype=float) - tracker.scheduled_target()
