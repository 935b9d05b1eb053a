"""Planar kinematic scene: frames, forward kinematics, analytic Jacobians, grasping.

The world is a 2D table plane.  A configuration stacks one value per revolute
joint (rad) and three values (x, y, theta) per free-planar frame.  Attachment
re-parents an object frame under a grasp frame at the relative pose captured
at attach time; it never changes the configuration layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

GRASP_POS_TOL = 0.02
GRASP_ANG_TOL = 0.1


class SceneError(Exception):
    """Structural problem in a scene definition."""


class DimensionError(Exception):
    """Configuration vector does not match the scene layout."""


class UnknownFrameError(Exception):
    """Reference to a frame that does not exist."""


class AttachError(Exception):
    """Attach/detach precondition violated."""


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return a - 2.0 * math.pi * math.floor((a + math.pi) / (2.0 * math.pi))


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def pose_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose planar poses a*b, each [x, y, theta]."""
    out = np.empty(3)
    out[:2] = a[:2] + rot(a[2]) @ b[:2]
    out[2] = a[2] + b[2]
    return out


def pose_inverse(a: np.ndarray) -> np.ndarray:
    out = np.empty(3)
    out[:2] = -(rot(-a[2]) @ a[:2])
    out[2] = -a[2]
    return out


@dataclass(frozen=True)
class Shape:
    kind: str = "none"  # none | disk | box | hook
    params: tuple = ()

    @property
    def radius(self) -> float:
        """Bounding radius used by distance features."""
        if self.kind == "disk":
            return self.params[0]
        if self.kind == "box":
            return 0.5 * math.hypot(self.params[0], self.params[1])
        return 0.0


@dataclass(frozen=True)
class Frame:
    name: str
    parent: str | None = None
    joint: str = "fixed"  # fixed | revolute | free
    offset: tuple = (0.0, 0.0, 0.0)
    shape: Shape = Shape()
    limits: tuple | None = None  # (lo, hi) for revolute joints only


@dataclass(frozen=True)
class Attachment:
    parent: str  # grasp frame
    offset: tuple  # relative pose captured at attach time


class Scene:
    """Immutable frame forest with a stable configuration layout."""

    def __init__(self, frames: list[Frame]):
        names = [f.name for f in frames]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SceneError(f"duplicate frame names: {dup}")
        self.frames = {f.name: f for f in frames}
        roots = [f.name for f in frames if f.parent is None]
        if len(roots) != 1:
            raise SceneError(f"scene must have exactly one root, got {roots}")
        self.root = roots[0]
        for f in frames:
            if f.parent is not None and f.parent not in self.frames:
                raise UnknownFrameError(f"frame {f.name!r} has unknown parent {f.parent!r}")
            if f.joint not in ("fixed", "revolute", "free"):
                raise SceneError(f"frame {f.name!r} has invalid joint {f.joint!r}")
            if f.joint == "free" and f.limits is not None:
                raise SceneError(f"free frame {f.name!r} may not carry joint limits")
            if f.limits is not None and not f.limits[0] < f.limits[1]:
                raise SceneError(f"frame {f.name!r} limits must satisfy lo < hi")
        self.order = self._topo_order(frames)
        # Layout: frame name -> (start, length) span in the configuration vector.
        self.layout: dict[str, tuple[int, int]] = {}
        i = 0
        for name in self.order:
            f = self.frames[name]
            n = {"fixed": 0, "revolute": 1, "free": 3}[f.joint]
            if n:
                self.layout[name] = (i, n)
                i += n
        self.dim = i
        self.actuated = np.array(
            [self.layout[n][0] for n in self.order if self.frames[n].joint == "revolute"],
            dtype=int,
        )
        self.free_frames = [n for n in self.order if self.frames[n].joint == "free"]

    def _topo_order(self, frames: list[Frame]) -> list[str]:
        children: dict[str, list[str]] = {f.name: [] for f in frames}
        for f in frames:
            if f.parent is not None:
                children[f.parent].append(f.name)
        order, stack, seen = [], [self.root], set()
        while stack:
            name = stack.pop(0)
            if name in seen:
                raise SceneError(f"cycle through frame {name!r}")
            seen.add(name)
            order.append(name)
            stack = children[name] + stack
        if len(order) != len(frames):
            missing = sorted(set(children) - seen)
            raise SceneError(f"frames unreachable from root: {missing}")
        return order

    def span(self, name: str) -> tuple[int, int]:
        if name not in self.frames:
            raise UnknownFrameError(f"unknown frame {name!r}")
        return self.layout.get(name, (0, 0))

    def check_config(self, config: np.ndarray):
        if config.shape != (self.dim,):
            raise DimensionError(
                f"configuration has shape {config.shape}, scene expects ({self.dim},); "
                f"layout root {self.root!r}"
            )


@dataclass(frozen=True)
class KinematicState:
    config: np.ndarray
    velocity: np.ndarray
    attachments: dict = field(default_factory=dict)  # object frame -> Attachment

    def holder_of(self, obj: str) -> str | None:
        a = self.attachments.get(obj)
        return a.parent if a else None

    def held_by(self, grasp_frame: str) -> str | None:
        for obj, a in self.attachments.items():
            if a.parent == grasp_frame:
                return obj
        return None


class FkResult:
    """Poses plus the DOF dependency chain of every frame.

    Each frame records (kind, dof index, anchor) entries for the DOFs on its
    effective root path, from which analytic Jacobian columns are assembled:
    'rev'/'rot' entries rotate about their anchor point, 'tx'/'ty' translate
    along the stored unit vector.
    """

    def __init__(self, poses: dict, deps: dict):
        self.poses = poses
        self.deps = deps

    def pose(self, name: str) -> np.ndarray:
        return np.asarray(self.poses[name])

    def position_jacobian(self, name: str, dim: int) -> np.ndarray:
        J = np.zeros((2, dim))
        px, py, _ = self.poses[name]
        for kind, idx, anchor in self.deps[name]:
            if kind == "tx" or kind == "ty":
                J[0, idx] = anchor[0]
                J[1, idx] = anchor[1]
            else:
                J[0, idx] = anchor[1] - py
                J[1, idx] = px - anchor[0]
        return J

    def orientation_jacobian(self, name: str, dim: int) -> np.ndarray:
        J = np.zeros((1, dim))
        for kind, idx, _ in self.deps[name]:
            if kind == "rev" or kind == "rot":
                J[0, idx] = 1.0
        return J


def forward_kinematics(scene: Scene, config: np.ndarray, attachments: dict | None = None) -> FkResult:
    """World pose of every frame; attached objects follow their grasp frame."""
    scene.check_config(config)
    attachments = attachments or {}
    poses: dict[str, tuple] = {}
    deps: dict[str, list] = {}
    cos, sin = math.cos, math.sin

    def compose(a, b):
        c, s = cos(a[2]), sin(a[2])
        return (a[0] + c * b[0] - s * b[1], a[1] + s * b[0] + c * b[1], a[2] + b[2])

    def resolve(name: str):
        if name in poses:
            return
        f = scene.frames[name]
        att = attachments.get(name)
        if att is not None:
            resolve(att.parent)
            poses[name] = compose(poses[att.parent], att.offset)
            deps[name] = deps[att.parent]
            return
        if f.parent is None:
            pre = f.offset
            chain: list = []
        else:
            resolve(f.parent)
            pre = compose(poses[f.parent], f.offset)
            chain = deps[f.parent]
        if f.joint == "fixed":
            poses[name] = pre
        elif f.joint == "revolute":
            start = scene.layout[name][0]
            poses[name] = (pre[0], pre[1], pre[2] + config[start])
            chain = chain + [("rev", start, (pre[0], pre[1]))]
        else:  # free
            start = scene.layout[name][0]
            world = compose(pre, (config[start], config[start + 1], config[start + 2]))
            poses[name] = world
            c, s = cos(pre[2]), sin(pre[2])
            chain = chain + [
                ("tx", start, (c, s)),
                ("ty", start + 1, (-s, c)),
                ("rot", start + 2, (world[0], world[1])),
            ]
        deps[name] = chain

    for name in scene.order:
        resolve(name)
    return FkResult(poses, deps)


def jacobian(
    scene: Scene,
    config: np.ndarray,
    frame: str,
    query: str = "position",
    attachments: dict | None = None,
) -> np.ndarray:
    """Analytic Jacobian of a frame's world position or orientation."""
    if frame not in scene.frames:
        raise UnknownFrameError(f"unknown frame {frame!r}")
    fk = forward_kinematics(scene, config, attachments)
    if query == "position":
        return fk.position_jacobian(frame, scene.dim)
    if query == "orientation":
        return fk.orientation_jacobian(frame, scene.dim)
    raise ValueError(f"query must be 'position' or 'orientation', got {query!r}")


def effective_config(scene: Scene, state: KinematicState) -> np.ndarray:
    """Configuration with attached objects' coordinates synced to their FK pose."""
    config = state.config.copy()
    if state.attachments:
        fk = forward_kinematics(scene, state.config, state.attachments)
        for obj in state.attachments:
            start, n = scene.span(obj)
            if n == 3:
                config[start : start + 3] = fk.pose(obj)
    return config


def attach(
    scene: Scene,
    state: KinematicState,
    grasp_frame: str,
    obj: str,
    pos_tol: float = GRASP_POS_TOL,
    ang_tol: float | None = GRASP_ANG_TOL,
) -> KinematicState:
    """Re-parent obj under grasp_frame, capturing the current relative pose."""
    for name in (grasp_frame, obj):
        if name not in scene.frames:
            raise UnknownFrameError(f"unknown frame {name!r}")
    if obj in state.attachments:
        if state.attachments[obj].parent == grasp_frame:
            return state
        raise AttachError(f"{obj!r} is already attached to {state.attachments[obj].parent!r}")
    fk = forward_kinematics(scene, state.config, state.attachments)
    rel = pose_compose(pose_inverse(fk.pose(grasp_frame)), fk.pose(obj))
    dist = math.hypot(rel[0], rel[1])
    if dist > pos_tol:
        raise AttachError(
            f"cannot attach {obj!r} to {grasp_frame!r}: distance {dist:.4f} m exceeds "
            f"tolerance {pos_tol} m"
        )
    if ang_tol is not None and abs(wrap_angle(rel[2])) > ang_tol:
        raise AttachError(
            f"cannot attach {obj!r} to {grasp_frame!r}: angle offset "
            f"{wrap_angle(rel[2]):.3f} rad exceeds tolerance {ang_tol} rad"
        )
    new_att = dict(state.attachments)
    new_att[obj] = Attachment(grasp_frame, tuple(rel))
    # Sync the object's config coordinates so detach/FK stay continuous.
    config = state.config.copy()
    start, n = scene.span(obj)
    if n == 3:
        config[start : start + 3] = fk.pose(obj)
    return replace(state, config=config, attachments=new_att)


def detach(scene: Scene, state: KinematicState, obj: str) -> KinematicState:
    """Release obj at its current world pose."""
    if obj not in state.attachments:
        raise AttachError(f"{obj!r} is not attached")
    fk = forward_kinematics(scene, state.config, state.attachments)
    config = state.config.copy()
    start, n = scene.span(obj)
    if n == 3:
        config[start : start + 3] = fk.pose(obj)
    new_att = dict(state.attachments)
    del new_att[obj]
    return replace(state, config=config, attachments=new_att)
