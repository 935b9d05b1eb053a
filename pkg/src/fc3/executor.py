"""Execution engine: initialization, feasibility-driven chain coordination,
and the linear / fixed-plan baselines.

Per control tick the coordinator checks the goal, keeps or re-selects a
chain by sequence feasibility (cached between checks), executes the most
downstream immediately-feasible controller, and fires its discrete signal one
step after final feasibility holds.  The linear baseline walks one chain
strictly in order; the fixed-plan baseline selects once and never re-checks
feasibility, recovering only by the downstream/upstream scan.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from fc3 import nlp
from fc3.chain import (
    ControllerChain,
    goal_satisfied,
    propagate_implicit,
    sequence_feasible,
)
from fc3.controller import (
    enter_controller,
    final_feasible,
    fire_signal,
    gripper_logic,
    immediate_feasible,
    solve_terminal,
    step,
)
from fc3.kinematics import AttachError, effective_config
from fc3.sim import (
    PerturbationEvent,
    Scenario,
    Teleport,
    World,
    apply_perturbation,
    instantiate_controller,
    instantiate_world,
    step_world,
)
from fc3.symbolic import (
    build_controller_chains,
    generate_action_tree,
    ground_actions,
    trim_action_tree,
)

log = logging.getLogger("fc3.executor")

SYSTEMS = ("fc3", "linear", "rgds")
CACHE_MOVE_TOL = 0.05
# Quick-reject probes are feasibility certificates, not anchors: a shorter
# budget at a looser solver tolerance suffices.
PROBE_OPTIONS = nlp.Options(mu0=10.0, max_outer=8, max_inner=30, tol_feas=5e-4)


@dataclass
class OutcomeRecord:
    scenario: str
    system: str
    interference: str
    trial: int
    outcome: str  # success | infeasible | timeout
    sim_time_s: float
    ticks: int
    chain_switches: int
    controllers_entered: list


@dataclass
class SeqCache:
    chain_id: str
    index: int
    tick: int
    verdict: bool
    waypoints: list
    snapshot: dict  # object -> (x, y)


@dataclass
class ExecutionState:
    library: list
    plan_chain: ControllerChain | None
    status: str = "running"  # running | success | infeasible | timeout
    active: ControllerChain | None = None
    active_idx: int = 0  # 1-based index of the executing controller
    executing: str | None = None
    run_ctx: object = None
    seq_cache: SeqCache | None = None
    current_done: bool = False
    selected_once: bool = False
    prev_chain_id: str | None = None
    chain_switches: int = 0
    entered: list = field(default_factory=list)
    tick_count: int = 0
    step_memo: dict = field(default_factory=dict)
    worker: object = None


def initialize(scenario: Scenario, world: World) -> ExecutionState:
    """Steps 1-5: ground the domain, grow and trim the action tree, build the
    chain library, and augment every chain with implicit constraints."""
    actions = ground_actions(scenario.schemas, scenario.objects)
    tree, plan, d_i, candidate = generate_action_tree(
        scenario.goal_atoms,
        scenario.init_atoms,
        actions,
        scenario.params.explore,
        consistent=scenario.consistency_checker(),
    )
    if plan is None:
        log.info("no verified plan exists: task symbolically infeasible")
        return ExecutionState(library=[], plan_chain=None, status="infeasible")
    trimmed = trim_action_tree(tree, candidate, scenario.params.trim_radius)
    scene = scenario.scene

    def chain_factory(fwd_plan, node_state):
        controllers = []
        for action in fwd_plan:
            names = dict(zip([p for p, _ in _schema_params(scenario, action.schema)], action.binding))
            for tmpl_set in scenario.action_templates[action.schema]:
                for tmpl in scenario.templates[tmpl_set]:
                    controllers.append(instantiate_controller(tmpl, names, scene))
        return ControllerChain(
            controllers=controllers,
            goal=scenario.goal,
            source=tuple(str(a) for a in fwd_plan),
            initial_holds=scenario.initial_holds_from_atoms(node_state),
        )

    library = build_controller_chains(trimmed, chain_factory)
    seed = effective_config(scene, world.state)
    terminal_cache: dict = {}
    library = [propagate_implicit(c, scene, seed, terminal_cache) for c in library]
    plan_source = tuple(str(a) for a in plan)
    plan_chain = next((c for c in library if c.source == plan_source), None)
    log.info(
        "initialized: %d tree nodes, %d chains, plan length %d",
        len(trimmed),
        len(library),
        len(plan),
    )
    return ExecutionState(library=library, plan_chain=plan_chain)


def _schema_params(scenario: Scenario, schema_name: str):
    for s in scenario.schemas:
        if s.name == schema_name:
            return s.params
    return ()


def _objects_xy(scenario, world) -> dict:
    config = effective_config(scenario.scene, world.state)
    out = {}
    for name in scenario.scene.free_frames:
        start, _ = scenario.scene.span(name)
        out[name] = (config[start], config[start + 1])
    return out


def _cache_fresh(es: ExecutionState, scenario, world) -> bool:
    c = es.seq_cache
    if c is None or es.active is None or c.chain_id != es.active.id:
        return False
    if not c.verdict:
        return False
    if es.active_idx and es.active_idx < c.index:
        return False  # upstream reset: the cached check covered fewer phases
    if es.tick_count - c.tick >= scenario.params.n_check:
        return False
    now = _objects_xy(scenario, world)
    for obj, (x, y) in now.items():
        sx, sy = c.snapshot.get(obj, (x, y))
        if (x - sx) ** 2 + (y - sy) ** 2 > CACHE_MOVE_TOL**2:
            return False
    return True


def _store_cache(es, scenario, world, index, res):
    es.seq_cache = SeqCache(
        chain_id=es.active.id if es.active else "",
        index=index,
        tick=es.tick_count,
        verdict=res.feasible,
        waypoints=res.waypoints[1:],
        snapshot=_objects_xy(scenario, world),
    )


def _free_root(scene, frame: str) -> str | None:
    """The free-planar ancestor whose pose determines this frame, if any."""
    name = frame
    while name is not None:
        f = scene.frames[name]
        if f.joint == "free":
            return name
        name = f.parent
    return None


def _chain_quick_reject(chain, from_index, scenario, world, memo) -> bool:
    """Sound fast rejection of a doomed chain.

    For every controller, take the constraint entries that reference only
    objects nothing upstream can move (plus its own held objects) and solve
    for a configuration satisfying just those.  If none exists the chain can
    never run that controller to convergence: mobility of unrelated objects
    cannot rescue constraints they do not appear in.
    """
    scene = scenario.scene
    x0 = effective_config(scene, world.state)
    movable = set(gripper_logic(world.state).values())
    for ctrl in chain.controllers[from_index - 1 :]:
        own = {obj for _, obj in ctrl.holds}
        frozen_entries = []
        for spec in ctrl.all_entries():
            if spec.feature.kind == "control_cost":
                continue
            refs = set()
            for fr in (spec.feature.frame_a, spec.feature.frame_b):
                if fr is not None:
                    root = _free_root(scene, fr)
                    if root is not None:
                        refs.add(root)
            if not (refs - own) & movable:
                frozen_entries.append(spec)
        if frozen_entries:
            key = (ctrl.name, tuple(frozen_entries))
            verdict = memo.get(key)
            if verdict is None:
                probe = replace(ctrl, costs=(), constraints=tuple(frozen_entries), implicit=())
                _, verdict = solve_terminal(probe, scene, x0, options=PROBE_OPTIONS)
                memo[key] = verdict
            if not verdict:
                return True
        movable |= own
    return False


def _select_chain(es: ExecutionState, scenario, world, events) -> bool:
    """One full library sweep with fresh solves; False means none feasible."""
    reject_memo: dict = {}
    for chain in es.library:
        if _chain_quick_reject(chain, 1, scenario, world, reject_memo):
            continue
        res = sequence_feasible(chain, 1, scenario.scene, world.state)
        if res.feasible:
            if es.prev_chain_id is not None and es.prev_chain_id != chain.id:
                es.chain_switches += 1
                events["switched"] = chain.id
            es.active = chain
            es.prev_chain_id = chain.id
            es.active_idx = 1
            es.selected_once = True
            _store_cache(es, scenario, world, 1, res)
            log.info("selected chain %s", chain.id)
            world.log(f"selected chain {chain.id}")
            return True
    return False


def _scan_and_act(es: ExecutionState, scenario, world, events, allow_signals=True):
    """Execute the most downstream controller whose F_I holds.

    Returns (reference, found): reference None means hold position.  For all
    chain positions downstream of the executed one F_I is false by
    construction of the scan.
    """
    scene = scenario.scene
    chain = es.active
    state = world.state
    logic = gripper_logic(state)
    found = None
    for k in range(len(chain.controllers), 0, -1):
        if immediate_feasible(chain.controllers[k - 1], scene, state, logic).holds:
            found = k
            break
    if found is None:
        return None, False
    ctrl = chain.controllers[found - 1]
    if es.executing != (chain.id, ctrl.name):
        es.run_ctx = enter_controller(ctrl, scene, state, scenario.params.tau)
        es.executing = (chain.id, ctrl.name)
        es.current_done = False
        es.entered.append(ctrl.name)
        events["entered"].append(ctrl.name)
        world.log(f"entered {ctrl.name}")
    es.active_idx = found
    if final_feasible(ctrl, scene, state).holds:
        fired_ok = True
        if allow_signals and ctrl.signal is not None:
            try:
                new_state = fire_signal(ctrl, scene, state)
                if new_state is not state:
                    world.state = new_state
                    events["signals"].append(ctrl.signal.kind)
                    world.log(f"signal {ctrl.signal.kind} by {ctrl.name}")
            except AttachError as e:
                fired_ok = False
                world.log(f"signal failed: {e}")
        es.current_done = fired_ok
        return None, True
    x_ref, ok = step(
        ctrl,
        scene,
        state,
        scenario.params.tau,
        es.run_ctx,
        vel_limit=scenario.params.joint_velocity_limit,
        memo=es.step_memo,
    )
    if not ok:
        return None, False
    return x_ref, True


def tick_fc3(es: ExecutionState, world: World, scenario: Scenario):
    """Goal check, chain (re)selection under the cache policy, downstream scan."""
    events = {"entered": [], "signals": []}
    if es.status != "running":
        return None, events
    if goal_satisfied(scenario.goal, scenario.scene, world.state):
        es.status = "success"
        world.log("goal satisfied")
        return None, events
    if es.active is not None and not _cache_fresh(es, scenario, world):
        idx = max(es.active_idx, 1)
        if es.current_done:
            idx = min(idx + 1, len(es.active.controllers) + 1)
        if _chain_quick_reject(es.active, idx, scenario, world, {}):
            world.log(f"chain {es.active.id} no longer feasible (terminal)")
            es.active = None
        else:
            seed_wp = None
            if es.seq_cache and es.seq_cache.chain_id == es.active.id and es.seq_cache.index == idx:
                seed_wp = es.seq_cache.waypoints
            worker = es.worker
            res = None
            if worker is None:
                res = sequence_feasible(es.active, idx, scenario.scene, world.state, seed_waypoints=seed_wp)
            else:
                done = worker.poll()
                if done is not None and done[0] == es.active.id:
                    idx = done[1]
                    res = done[2]
                elif worker.pending is None:
                    worker.submit(es.active, idx, scenario.scene, world.state, seed_wp)
            if res is not None:
                _store_cache(es, scenario, world, idx, res)
                if not res.feasible:
                    world.log(f"chain {es.active.id} no longer feasible ({res.reason})")
                    es.active = None
    if es.active is None:
        if not _select_chain(es, scenario, world, events):
            es.status = "infeasible"
            world.log("no feasible chain: task infeasible")
            return None, events
    reference, usable = _scan_and_act(es, scenario, world, events)
    if not usable:
        world.log(f"chain {es.active.id} has no initiable controller")
        es.active = None  # re-selection next tick
        return None, events
    return reference, events


def tick_rgds(es: ExecutionState, world: World, scenario: Scenario):
    """Fixed plan: selected once, never re-checked; scan-based resets only."""
    events = {"entered": [], "signals": []}
    if es.status != "running":
        return None, events
    if goal_satisfied(scenario.goal, scenario.scene, world.state):
        es.status = "success"
        world.log("goal satisfied")
        return None, events
    if not es.selected_once:
        if not _select_chain(es, scenario, world, events):
            es.status = "infeasible"
            return None, events
    if es.active is None:
        return None, events
    reference, usable = _scan_and_act(es, scenario, world, events)
    if not usable:
        return None, events  # stuck until the world changes or timeout
    return reference, events


def tick_linear(es: ExecutionState, world: World, scenario: Scenario):
    """Strictly ordered execution: advance only when the next controller's
    immediate feasibility holds; never jump back or forward."""
    events = {"entered": [], "signals": []}
    if es.status != "running":
        return None, events
    scene = scenario.scene
    if goal_satisfied(scenario.goal, scene, world.state):
        es.status = "success"
        world.log("goal satisfied")
        return None, events
    chain = es.plan_chain
    if chain is None or not chain.controllers:
        return None, events
    if es.active_idx == 0:
        es.active_idx = 1
    state = world.state
    i = es.active_idx
    ctrl = chain.controllers[i - 1]
    if final_feasible(ctrl, scene, state).holds and ctrl.signal is not None:
        try:
            new_state = fire_signal(ctrl, scene, state)
            if new_state is not state:
                world.state = new_state
                events["signals"].append(ctrl.signal.kind)
                world.log(f"signal {ctrl.signal.kind} by {ctrl.name}")
        except AttachError as e:
            world.log(f"signal failed: {e}")
    if i < len(chain.controllers):
        nxt = chain.controllers[i]
        if immediate_feasible(nxt, scene, world.state).holds:
            es.active_idx = i + 1
            ctrl = nxt
            i += 1
    if es.executing != (chain.id, ctrl.name):
        es.run_ctx = enter_controller(ctrl, scene, world.state, scenario.params.tau)
        es.executing = (chain.id, ctrl.name)
        es.entered.append(ctrl.name)
        events["entered"].append(ctrl.name)
        world.log(f"entered {ctrl.name}")
    if final_feasible(ctrl, scene, world.state).holds:
        return None, events
    x_ref, ok = step(
        ctrl,
        scene,
        world.state,
        scenario.params.tau,
        es.run_ctx,
        vel_limit=scenario.params.joint_velocity_limit,
        memo=es.step_memo,
    )
    return (x_ref if ok else None), events


TICKS = {"fc3": tick_fc3, "linear": tick_linear, "rgds": tick_rgds}


class BackgroundChecker:
    """One worker thread solving sequence-feasibility checks off the loop.

    The executor submits an immutable state snapshot and consumes the verdict
    at a later tick boundary; while a check is in flight the cached verdict
    stays in force (the cache-validity rule bounds its staleness).
    """

    def __init__(self):
        import queue as _queue

        self._in: "_queue.Queue" = _queue.Queue()
        self._out: "_queue.Queue" = _queue.Queue()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        self.pending = None  # (chain id, index) of the in-flight check

    def _loop(self):
        while True:
            job = self._in.get()
            if job is None:
                return
            chain, idx, scene, state, seed_wp = job
            try:
                res = sequence_feasible(chain, idx, scene, state, seed_waypoints=seed_wp)
            except Exception as e:  # surface as infeasible with diagnostics
                log.warning("background check failed: %s", e)
                from fc3.chain import SequenceFeasibilityResult

                res = SequenceFeasibilityResult(False, [], 0.0, 0.0, reason=f"error:{e}")
            self._out.put((chain.id, idx, res))

    def submit(self, chain, idx, scene, state, seed_wp):
        self.pending = (chain.id, idx)
        self._in.put((chain, idx, scene, state, seed_wp))

    def poll(self):
        import queue as _queue

        try:
            result = self._out.get_nowait()
        except _queue.Empty:
            return None
        self.pending = None
        return result

    def close(self):
        self._in.put(None)
        self._thread.join(timeout=1.0)


class InterferenceScript:
    """Scripted perturbations; triggers fire once unless marked repeating."""

    def __init__(self, events):
        self.pending = [[ev, False] for ev in events]

    def due(self, sim_time: float, entered, signals):
        out = []
        for slot in self.pending:
            ev, fired = slot
            if fired and not ev.repeating:
                continue
            hit = (
                (ev.trigger == "at_time" and sim_time >= float(ev.value))
                or (ev.trigger == "on_controller_entered" and ev.value in entered)
                or (ev.trigger == "on_signal" and ev.value in signals)
            )
            if hit:
                slot[1] = True
                out.append(ev)
        return out


class TrialRunner:
    """One deterministic trial: world, execution state, interference script."""

    def __init__(
        self,
        scenario: Scenario,
        system: str,
        interference: str = "I0",
        seed: int = 0,
        trial: int = 0,
        timeout: float | None = None,
        background: bool = False,
    ):
        if system not in SYSTEMS:
            raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")
        if interference not in scenario.interferences:
            raise ValueError(f"scenario {scenario.name!r} has no interference {interference!r}")
        self.scenario = scenario
        self.system = system
        self.interference = interference
        self.trial = trial
        rng = np.random.default_rng([seed, trial, _interference_index(interference)])
        self.world = instantiate_world(scenario, rng, interference)
        self.es = initialize(scenario, self.world)
        if background and system == "fc3":
            self.es.worker = BackgroundChecker()
        self.script = InterferenceScript(scenario.interferences[interference])
        self.timeout = timeout if timeout is not None else scenario.params.timeout
        self.ticks = 0
        self._tick_fn = TICKS[system]

    def close(self):
        if self.es.worker is not None:
            self.es.worker.close()
            self.es.worker = None

    @property
    def finished(self) -> bool:
        return self.es.status != "running"

    def tick(self):
        if self.finished:
            return
        quiet_before = not np.any(self.world.state.velocity)
        sig_before = self.world.state.config.tobytes()
        reference, events = self._tick_fn(self.es, self.world, self.scenario)
        if self.es.status != "running":
            return
        step_world(self.world, reference, self.scenario.params.tau)
        self.es.tick_count += 1
        self.ticks += 1
        fired = False
        for ev in self.script.due(self.world.sim_time, events["entered"], events["signals"]):
            apply_perturbation(self.world, ev)
            fired = True
        if self.world.sim_time >= self.timeout:
            self.es.status = "timeout"
            self.world.log("timeout")
            return
        # A held baseline in a quiescent world repeats the identical tick
        # until a timed trigger or the timeout; skip ahead in one move.
        if (
            self.system in ("linear", "rgds")
            and reference is None
            and quiet_before
            and not fired
            and not events["entered"]
            and not events["signals"]
            and self.world.state.config.tobytes() == sig_before
        ):
            tau = self.scenario.params.tau
            horizon = self.timeout
            for slot in self.script.pending:
                ev, done = slot
                if ev.trigger == "at_time" and not done:
                    horizon = min(horizon, float(ev.value))
            n = int((horizon - self.world.sim_time) / tau) - 1
            if n > 0:
                self.world.sim_time += n * tau
                self.es.tick_count += n
                self.ticks += n

    def inject(self, interference: str):
        """Fire a scripted interference immediately (live-session command)."""
        for ev in self.scenario.interferences.get(interference, []):
            apply_perturbation(self.world, ev)

    def drag(self, obj: str, pose):
        apply_perturbation(
            self.world,
            PerturbationEvent(trigger="manual", effects=(_teleport(obj, pose),)),
        )

    def record(self) -> OutcomeRecord:
        return OutcomeRecord(
            scenario=self.scenario.name,
            system=self.system,
            interference=self.interference,
            trial=self.trial,
            outcome=self.es.status if self.es.status != "running" else "timeout",
            sim_time_s=round(self.world.sim_time, 6),
            ticks=self.ticks,
            chain_switches=self.es.chain_switches,
            controllers_entered=list(self.es.entered),
        )


def _teleport(obj, pose):
    return Teleport(obj=obj, pose=tuple(pose))


def _interference_index(name: str) -> int:
    digits = "".join(ch for ch in name if ch.isdigit())
    return int(digits) if digits else 0


def run(
    scenario: Scenario,
    system: str,
    interference: str = "I0",
    seed: int = 0,
    trial: int = 0,
    timeout: float | None = None,
) -> OutcomeRecord:
    """Run one trial to completion; a pure function of its arguments."""
    runner = TrialRunner(scenario, system, interference, seed=seed, trial=trial, timeout=timeout)
    while not runner.finished:
        runner.tick()
    return runner.record()
