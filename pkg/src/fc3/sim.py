"""Deterministic kinematic world, perturbation events, and scenario assembly.

Scenarios are defined in YAML (bundled under fc3/scenarios/): world frames,
STRIPS domain, controller templates per action, goal constraints, parameters,
spawn rules, and scripted interference libraries.  The world steps robot
joints toward a reference with a velocity clamp; objects move only through
attachments or perturbation events (teleports).
"""

from __future__ import annotations

import importlib.resources
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from fc3.controller import Controller, LogicPrecondition, Signal, hold_coupling_spec
from fc3.features import ConstraintSpec, Feature
from fc3.kinematics import (
    Frame,
    KinematicState,
    Scene,
    SceneError,
    Shape,
    UnknownFrameError,
    effective_config,
    forward_kinematics,
)
from fc3.symbolic import ActionSchema, MutexGroup, ground_mutex_groups, make_consistency_checker


class ScenarioError(Exception):
    """Scenario validation failed; carries every collected problem."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_ATOM_RE = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*(?:\((.*)\))?\s*$")


def parse_atom(text: str) -> tuple:
    m = _ATOM_RE.match(text)
    if not m:
        raise ValueError(f"malformed atom {text!r}")
    name, args = m.group(1), m.group(2)
    if args is None or args.strip() == "":
        return (name,)
    return (name, *[a.strip() for a in args.split(",")])


@dataclass(frozen=True)
class Region:
    kind: str  # pose | annulus
    pose: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0)
    radius: tuple = (0.0, 0.0)
    bearing: tuple = (0.0, math.pi)
    theta: float = 0.0

    def sample(self, rng) -> np.ndarray:
        if self.kind == "pose":
            return np.asarray(self.pose, dtype=float)
        r = rng.uniform(*self.radius)
        b = rng.uniform(*self.bearing)
        return np.array(
            [self.center[0] + r * math.cos(b), self.center[1] + r * math.sin(b), self.theta]
        )


@dataclass(frozen=True)
class Teleport:
    obj: str
    pose: tuple | None = None
    delta: tuple | None = None
    snap_frame: str | None = None
    snap_offset: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PerturbationEvent:
    trigger: str  # at_time | on_controller_entered | on_signal | manual
    value: object = None
    effects: tuple = ()
    repeating: bool = False


@dataclass
class Params:
    tau: float = 0.02
    n_check: int = 10
    eps_feas: float = 1e-3
    timeout: float = 120.0
    explore: int = 1
    trim_radius: int = 1
    joint_velocity_limit: float = 1.0
    free_velocity_limit: float = 0.5
    min_separation: float = 0.15


@dataclass
class ControllerTemplate:
    name: str
    costs: tuple = ()
    constraints: tuple = ()
    signal: dict | None = None
    precondition: dict | None = None
    holds: tuple = ()


@dataclass
class HoldingAtom:
    pred: str
    frame: str  # may contain {0},{1} argument placeholders
    object_arg: int = 0


@dataclass
class Scenario:
    name: str
    scene: Scene
    params: Params
    objects: dict
    schemas: list
    action_templates: dict  # schema name -> list of template names
    templates: dict  # template name -> list[ControllerTemplate]
    init_atoms: frozenset
    goal_atoms: frozenset
    mutex_groups: list
    holding_atoms: list
    goal: tuple  # goal constraint specs G
    interferences: dict
    spawn: list  # (frame, Region)
    spawn_overrides: dict  # interference -> {frame: Region}
    initial_joints: dict

    def consistency_checker(self):
        return make_consistency_checker(ground_mutex_groups(self.mutex_groups, self.objects))

    def initial_holds_from_atoms(self, atoms) -> dict:
        """Map holding-style atoms of a logic state to grasp-frame -> object."""
        holds = {}
        for atom in atoms:
            for spec in self.holding_atoms:
                if atom[0] == spec.pred:
                    args = atom[1:]
                    frame = spec.frame.format(*args)
                    holds[frame] = args[spec.object_arg]
        return holds


@dataclass
class World:
    scene: Scene
    state: KinematicState
    params: Params
    sim_time: float = 0.0
    event_log: list = field(default_factory=list)

    def log(self, message: str):
        self.event_log.append((round(self.sim_time, 6), message))


def step_world(world: World, x_ref, tau: float) -> None:
    """Advance one control period toward the reference configuration.

    Robot joints move with the velocity clamp; attached objects follow their
    grasp frame; unattached objects do not move at all.
    """
    scene = world.scene
    state = world.state
    old = effective_config(scene, state)
    q = state.config.copy()
    act = scene.actuated
    if x_ref is not None and act.size:
        limit = world.params.joint_velocity_limit * tau
        q[act] = q[act] + np.clip(np.asarray(x_ref)[act] - q[act], -limit, limit)
    if state.attachments:
        fk = forward_kinematics(scene, q, state.attachments)
        for obj in state.attachments:
            start, n = scene.span(obj)
            if n == 3:
                q[start : start + 3] = fk.pose(obj)
    velocity = (q - old) / tau
    world.state = replace(state, config=q, velocity=velocity)
    world.sim_time += tau


def apply_perturbation(world: World, event: PerturbationEvent) -> None:
    """Teleport objects; attachments to a teleported object are severed."""
    scene = world.scene
    for eff in event.effects:
        if eff.obj not in scene.frames:
            raise UnknownFrameError(f"perturbation references unknown object {eff.obj!r}")
        start, n = scene.span(eff.obj)
        if n != 3:
            raise UnknownFrameError(f"perturbation target {eff.obj!r} is not a free object")
        state = world.state
        fk = forward_kinematics(scene, state.config, state.attachments)
        current = fk.pose(eff.obj)
        if eff.pose is not None:
            pose = np.asarray(eff.pose, dtype=float)
        elif eff.delta is not None:
            pose = current + np.asarray(eff.delta, dtype=float)
        else:
            anchor = fk.pose(eff.snap_frame)
            off = np.asarray(eff.snap_offset, dtype=float)
            pose = np.array([anchor[0] + off[0], anchor[1] + off[1], anchor[2] + off[2]])
        config = state.config.copy()
        config[start : start + 3] = pose
        attachments = dict(state.attachments)
        severed = attachments.pop(eff.obj, None)
        # A held object that is taken severs the grasp; anything attached to
        # the teleported object (e.g. a block on a hooked stick) rides along.
        world.state = replace(state, config=config, attachments=attachments)
        world.log(
            f"teleport {eff.obj} to ({pose[0]:.3f},{pose[1]:.3f},{pose[2]:.3f})"
            + (f" severed from {severed.parent}" if severed else "")
        )


# --- scenario assembly -------------------------------------------------------


def _feature_from_dict(d: dict, binding: dict, errors, where: str, scene_frames) -> Feature | None:
    kind = d.get("kind")
    if kind not in Feature.KINDS:
        errors.append(f"{where}: unknown feature kind {kind!r}")
        return None
    frames = [f.format_map(binding) for f in d.get("frames", [])]
    for f in frames:
        if scene_frames is not None and f not in scene_frames:
            errors.append(f"{where}: unknown frame {f!r}")
    return Feature(
        kind=kind,
        frame_a=frames[0] if len(frames) > 0 else None,
        frame_b=frames[1] if len(frames) > 1 else None,
        target=tuple(d.get("target", ())),
        margin=float(d.get("margin", 0.0)),
        alpha=float(d.get("alpha", 1.0)),
    )


def _spec_from_dict(d: dict, binding: dict, errors, where: str, scene_frames) -> ConstraintSpec | None:
    feature = _feature_from_dict(d, binding, errors, where, scene_frames)
    if feature is None:
        return None
    eps = d.get("transient_epsilon")
    try:
        return ConstraintSpec(
            feature=feature,
            comparator=d.get("comparator", "eq"),
            transient_epsilon=float(eps) if eps is not None else None,
            weight=float(d.get("weight", 1.0)),
            label=d.get("label", "").format_map(binding),
        )
    except Exception as e:  # comparator/epsilon validation
        errors.append(f"{where}: {e}")
        return None


def instantiate_controller(template: ControllerTemplate, binding: dict, scene: Scene) -> Controller:
    errors: list = []
    frames = scene.frames
    name = template.name.format_map(binding)
    costs = tuple(
        s
        for s in (
            _spec_from_dict(c, binding, errors, f"{name} cost", frames) for c in template.costs
        )
        if s is not None
    )
    constraints = [
        s
        for s in (
            _spec_from_dict(c, binding, errors, f"{name} constraint", frames)
            for c in template.constraints
        )
        if s is not None
    ]
    holds = tuple(
        (g.format_map(binding), o.format_map(binding)) for g, o in template.holds
    )
    for g, o in holds:
        spec = hold_coupling_spec(g, o)
        if not any(c.hold_pair == spec.hold_pair for c in constraints):
            constraints.append(spec)
    signal = None
    if template.signal:
        s = template.signal
        signal = Signal(
            kind=s["kind"],
            grasp_frame=s["frame"].format_map(binding),
            obj=s.get("object", "").format_map(binding) or None,
            to_frame=(s.get("to") or "").format_map(binding) or None,
        )
    precondition = None
    if template.precondition:
        p = template.precondition
        precondition = LogicPrecondition(
            kind=p["kind"],
            grasp_frame=p["frame"].format_map(binding),
            obj=(p.get("object") or "").format_map(binding) or None,
        )
    if errors:
        raise ScenarioError(errors)
    return Controller(
        name=name,
        costs=costs,
        constraints=tuple(constraints),
        signal=signal,
        precondition=precondition,
        holds=holds,
    )


def _region_from_dict(d: dict, errors, where: str) -> Region:
    if "pose" in d:
        return Region(kind="pose", pose=tuple(d["pose"]))
    if "annulus" in d:
        a = d["annulus"]
        return Region(
            kind="annulus",
            center=tuple(a.get("center", (0.0, 0.0))),
            radius=tuple(a["radius"]),
            bearing=tuple(a.get("bearing", (0.0, math.pi))),
            theta=float(a.get("theta", 0.0)),
        )
    errors.append(f"{where}: region needs 'pose' or 'annulus'")
    return Region(kind="pose")


def _event_from_dict(d: dict, errors, where: str, scene_frames) -> PerturbationEvent:
    trig = d.get("trigger", {})
    kinds = [k for k in ("at_time", "on_controller_entered", "on_signal", "manual") if k in trig]
    if len(kinds) != 1:
        errors.append(f"{where}: trigger must name exactly one of at_time/on_controller_entered/on_signal/manual")
        kind, value = "manual", None
    else:
        kind = kinds[0]
        value = trig[kind]
    effects = []
    for t in d.get("teleport", []):
        obj = t.get("object")
        if scene_frames is not None and obj not in scene_frames:
            errors.append(f"{where}: teleport of unknown object {obj!r}")
        effects.append(
            Teleport(
                obj=obj,
                pose=tuple(t["pose"]) if "pose" in t else None,
                delta=tuple(t["delta"]) if "delta" in t else None,
                snap_frame=t.get("snap_to", {}).get("frame"),
                snap_offset=tuple(t.get("snap_to", {}).get("offset", (0, 0, 0))),
            )
        )
    return PerturbationEvent(
        trigger=kind, value=value, effects=tuple(effects), repeating=bool(d.get("repeating", False))
    )


def scenario_from_dict(data: dict) -> Scenario:
    """Build and exhaustively validate a scenario; all problems are reported."""
    errors: list = []
    name = data.get("name", "scenario")

    frames = []
    for fd in data.get("world", {}).get("frames", []):
        shape = Shape()
        if "shape" in fd:
            sd = fd["shape"]
            shape = Shape(kind=sd["kind"], params=tuple(sd.get("params", ())))
        frames.append(
            Frame(
                name=fd["name"],
                parent=fd.get("parent"),
                joint=fd.get("joint", "fixed"),
                offset=tuple(fd.get("offset", (0.0, 0.0, 0.0))),
                shape=shape,
                limits=tuple(fd["limits"]) if "limits" in fd else None,
            )
        )
    scene = None
    try:
        scene = Scene(frames)
    except (SceneError, UnknownFrameError) as e:
        errors.append(f"world: {e}")
    scene_frames = scene.frames if scene else None

    pd = data.get("params", {})
    params = Params(
        tau=float(pd.get("tau", 0.02)),
        n_check=int(pd.get("n_check", 10)),
        eps_feas=float(pd.get("eps_feas", 1e-3)),
        timeout=float(pd.get("timeout", 120.0)),
        explore=int(pd.get("explore", 1)),
        trim_radius=int(pd.get("trim_radius", 1)),
        joint_velocity_limit=float(pd.get("joint_velocity_limit", 1.0)),
        free_velocity_limit=float(pd.get("free_velocity_limit", 0.5)),
        min_separation=float(pd.get("min_separation", 0.15)),
    )
    if params.tau <= 0:
        errors.append("params: tau must be > 0")
    if params.timeout <= 0:
        errors.append("params: timeout must be > 0")

    dom = data.get("domain", {})
    objects = dict(dom.get("objects", {}))
    schemas = []
    action_templates = {}
    for ad in dom.get("actions", []):
        try:
            schemas.append(
                ActionSchema(
                    name=ad["name"],
                    params=tuple((p[0], p[1]) for p in ad.get("params", [])),
                    pre=tuple(parse_atom(a) for a in ad.get("pre", [])),
                    add=tuple(parse_atom(a) for a in ad.get("add", [])),
                    delete=tuple(parse_atom(a) for a in ad.get("delete", [])),
                )
            )
        except ValueError as e:
            errors.append(f"action {ad.get('name')}: {e}")
            continue
        action_templates[ad["name"]] = list(ad.get("controllers", []))

    templates = {}
    for tname, tlist in data.get("controllers", {}).items():
        out = []
        for td in tlist:
            out.append(
                ControllerTemplate(
                    name=td["name"],
                    costs=tuple(td.get("costs", [])),
                    constraints=tuple(td.get("constraints", [])),
                    signal=td.get("signal"),
                    precondition=td.get("precondition"),
                    holds=tuple((h[0], h[1]) for h in td.get("holds", [])),
                )
            )
        templates[tname] = out
    for aname, tnames in action_templates.items():
        for tname in tnames:
            if tname not in templates:
                errors.append(f"action {aname!r}: unknown controller template {tname!r}")

    # Validate template feature references eagerly with a dummy binding.
    if scene is not None:
        for tname, tlist in templates.items():
            for tmpl in tlist:
                dummy = _DummyBinding()
                for c in tmpl.costs + tmpl.constraints:
                    _feature_from_dict(c, dummy, errors, f"template {tname}", None)

    try:
        init_atoms = frozenset(parse_atom(a) for a in dom.get("init", []))
        goal_atoms = frozenset(parse_atom(a) for a in dom.get("goal", []))
    except ValueError as e:
        errors.append(f"domain atoms: {e}")
        init_atoms = goal_atoms = frozenset()

    mutex_groups = []
    for md in dom.get("mutexes", []):
        try:
            mutex_groups.append(
                MutexGroup(
                    params=tuple((p[0], p[1]) for p in md.get("params", [])),
                    atoms=tuple(parse_atom(a) for a in md.get("atoms", [])),
                )
            )
        except ValueError as e:
            errors.append(f"mutex group: {e}")

    holding_atoms = [
        HoldingAtom(pred=h["pred"], frame=h["frame"], object_arg=int(h.get("object_arg", 0)))
        for h in dom.get("holding_atoms", [])
    ]

    goal_specs = []
    for gd in data.get("goal_G", []):
        spec = _spec_from_dict(gd, {}, errors, "goal_G", scene_frames)
        if spec is not None:
            goal_specs.append(replace(spec, label=spec.label or spec.name()))

    spawn = []
    for sd in data.get("spawn", []):
        frame = sd.get("frame")
        if scene_frames is not None and frame not in scene_frames:
            errors.append(f"spawn: unknown frame {frame!r}")
        spawn.append((frame, _region_from_dict(sd, errors, f"spawn {frame}")))

    interferences = {}
    spawn_overrides = {}
    for iname, idata in data.get("interferences", {}).items():
        events = [
            _event_from_dict(e, errors, f"{iname}", scene_frames) for e in idata.get("events", [])
        ]
        interferences[iname] = events
        overrides = {}
        for frame, rd in idata.get("spawn_overrides", {}).items():
            if scene_frames is not None and frame not in scene_frames:
                errors.append(f"{iname}: spawn override for unknown frame {frame!r}")
            overrides[frame] = _region_from_dict(rd, errors, f"{iname} override {frame}")
        spawn_overrides[iname] = overrides

    initial_joints = dict(data.get("world", {}).get("initial_joints", {}))
    if scene is not None:
        for jname in initial_joints:
            if jname not in scene.frames or scene.frames[jname].joint != "revolute":
                errors.append(f"initial_joints: {jname!r} is not a revolute joint")

    if errors:
        raise ScenarioError(errors)
    return Scenario(
        name=name,
        scene=scene,
        params=params,
        objects=objects,
        schemas=schemas,
        action_templates=action_templates,
        templates=templates,
        init_atoms=init_atoms,
        goal_atoms=goal_atoms,
        mutex_groups=mutex_groups,
        holding_atoms=holding_atoms,
        goal=tuple(goal_specs),
        interferences=interferences,
        spawn=spawn,
        spawn_overrides=spawn_overrides,
        initial_joints=initial_joints,
    )


class _DummyBinding(dict):
    def __missing__(self, key):
        return key


def build_scenario(name: str) -> Scenario:
    """Load one of the bundled scenarios (tower, stick, handover)."""
    path = importlib.resources.files("fc3") / "scenarios" / f"{name}.yaml"
    with path.open("r") as fh:
        data = yaml.safe_load(fh)
    return scenario_from_dict(data)


def instantiate_world(scenario: Scenario, rng, interference: str = "I0") -> World:
    """Sample object spawn poses and assemble the deterministic world."""
    scene = scenario.scene
    config = np.zeros(scene.dim)
    for jname, q in scenario.initial_joints.items():
        config[scene.layout[jname][0]] = float(q)
    overrides = scenario.spawn_overrides.get(interference, {})
    placed: list = []
    for frame, region in scenario.spawn:
        region = overrides.get(frame, region)
        pose = None
        for _ in range(1000):
            cand = region.sample(rng)
            if all(
                math.hypot(cand[0] - p[0], cand[1] - p[1]) >= scenario.params.min_separation
                for p in placed
            ):
                pose = cand
                break
        if pose is None:
            pose = region.sample(rng)  # crowded region: accept the overlap
        placed.append(pose)
        start, n = scene.span(frame)
        config[start : start + n] = pose[:n]
    state = KinematicState(config=config, velocity=np.zeros(scene.dim), attachments={})
    return World(scene=scene, state=state, params=scenario.params)
