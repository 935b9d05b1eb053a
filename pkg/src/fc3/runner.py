"""Batch runner, scenario file loading, CSV results, and the live-session bridge.

CLI:
    fc3 run --scenario tower --system fc3 --interference I4 --trials 5 --seed 0 --out out.csv
    fc3 serve --scenario tower --port 8765
    fc3 check --scenario path/to/file.yaml

Scenario arguments accept a bundled name (tower, stick, handover) or a YAML
path.  FC3_LOG sets the log level.  The live session speaks newline-free
single-object JSON messages over one websocket; state frames stream at 30 Hz.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import queue
import sys
import threading
import time

import yaml

from fc3.executor import SYSTEMS, OutcomeRecord, TrialRunner, run
from fc3.kinematics import forward_kinematics
from fc3.sim import Scenario, ScenarioError, build_scenario, scenario_from_dict

log = logging.getLogger("fc3.runner")

CSV_COLUMNS = [
    "scenario",
    "system",
    "interference",
    "trial",
    "outcome",
    "sim_time_s",
    "ticks",
    "chain_switches",
    "controllers_entered",
]


def load_scenario(path: str) -> Scenario:
    """Load and validate a scenario file; bundled names resolve too."""
    if not os.path.exists(path) and not path.endswith(".yaml"):
        return build_scenario(path)
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return scenario_from_dict(data)


def record_to_row(rec: OutcomeRecord) -> list:
    return [
        rec.scenario,
        rec.system,
        rec.interference,
        rec.trial,
        rec.outcome,
        f"{rec.sim_time_s:.3f}",
        rec.ticks,
        rec.chain_switches,
        ";".join(rec.controllers_entered),
    ]


def write_csv(records, out) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow(record_to_row(rec))
    text = buf.getvalue()
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    return text


def aggregate(records) -> dict:
    """Mean sim time of successful trials per cell; None when no success."""
    cells: dict = {}
    for rec in records:
        cells.setdefault((rec.scenario, rec.system, rec.interference), []).append(rec)
    out = {}
    for key, recs in sorted(cells.items()):
        times = [r.sim_time_s for r in recs if r.outcome == "success"]
        out[key] = sum(times) / len(times) if times else None
    return out


def format_aggregate(agg: dict) -> str:
    lines = ["scenario  system  interference  mean_sim_time_s"]
    for (scen, sysk, inter), mean in agg.items():
        cell = f"{mean:.2f}" if mean is not None else "-"
        lines.append(f"{scen:9s} {sysk:7s} {inter:13s} {cell}")
    return "\n".join(lines)


def _run_cell(args):
    scenario, system, interference, seed, trial, timeout = args
    return run(scenario, system, interference, seed=seed, trial=trial, timeout=timeout)


def parallel_run(cells, workers: int = 1):
    """Run (scenario, system, interference, seed, trial, timeout) cells,
    optionally across processes; order of results matches the input."""
    if workers <= 1 or len(cells) <= 1:
        return [_run_cell(c) for c in cells]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(min(workers, len(cells))) as pool:
        return pool.map(_run_cell, cells)


def run_batch(
    scenarios,
    systems,
    interferences,
    trials: int,
    seed: int,
    out_path: str | None = None,
    timeout: float | None = None,
    workers: int = 1,
):
    """Every (scenario, system, interference, trial) cell as one CSV row."""
    cells = []
    for scenario in scenarios:
        inter_list = interferences or sorted(scenario.interferences)
        for system in systems:
            for interference in inter_list:
                if interference not in scenario.interferences:
                    continue
                for trial in range(trials):
                    cells.append((scenario, system, interference, seed, trial, timeout))
    records = parallel_run(cells, workers)
    for rec in records:
        log.info(
            "%s %s %s trial %d: %s (%.2f s)",
            rec.scenario,
            rec.system,
            rec.interference,
            rec.trial,
            rec.outcome,
            rec.sim_time_s,
        )
    csv_text = write_csv(records, out_path)
    return records, aggregate(records), csv_text


# --- live session --------------------------------------------------------------


class LiveSession:
    """Owns one trial and a command queue; the network layer stays thin.

    Zero commands leave the outcome identical to a headless run of the same
    scenario and interference.
    """

    def __init__(self, scenario: Scenario, system: str = "fc3", interference: str = "I0", seed: int = 0):
        self.scenario = scenario
        self.system = system
        self.interference = interference
        self.seed = seed
        self.runner = TrialRunner(scenario, system, interference, seed=seed)
        self.commands: queue.Queue = queue.Queue()
        self.paused = False
        self.lock = threading.Lock()

    def submit(self, command: dict):
        self.commands.put(command)

    def _apply_command(self, cmd: dict):
        kind = cmd.get("type")
        if kind == "drag":
            self.runner.drag(cmd["object"], (cmd["x"], cmd["y"], cmd.get("theta", 0.0)))
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "reset":
            self.interference = cmd.get("interference", self.interference)
            scenario = cmd.get("scenario")
            if scenario:
                self.scenario = load_scenario(scenario)
            self.runner = TrialRunner(
                self.scenario, self.system, self.interference, seed=self.seed
            )
        elif kind == "inject":
            self.runner.inject(cmd["interference"])
        elif kind == "select_system":
            system = cmd["system"]
            if system not in SYSTEMS:
                raise ValueError(f"unknown system {system!r}")
            self.system = system
            self.runner = TrialRunner(
                self.scenario, self.system, self.interference, seed=self.seed
            )
        else:
            raise ValueError(f"unknown command type {kind!r}")

    def tick(self):
        """Drain pending commands (pause defers drags until resume), then step."""
        with self.lock:
            pending = []
            while True:
                try:
                    cmd = self.commands.get_nowait()
                except queue.Empty:
                    break
                if self.paused and cmd.get("type") == "drag":
                    pending.append(cmd)  # applied on resume
                    continue
                self._apply_command(cmd)
                if not self.paused and pending:
                    for p in pending:
                        self._apply_command(p)
                    pending = []
            for p in pending:
                self.commands.put(p)
            if not self.paused and not self.runner.finished:
                self.runner.tick()

    def state_frame(self) -> dict:
        with self.lock:
            w = self.runner.world
            scene = self.scenario.scene
            fk = forward_kinematics(scene, w.state.config, w.state.attachments)
            frames = []
            for name in scene.order:
                f = scene.frames[name]
                pose = fk.poses[name]
                frames.append(
                    {
                        "name": name,
                        "x": round(pose[0], 6),
                        "y": round(pose[1], 6),
                        "theta": round(pose[2], 6),
                        "shape": {"type": f.shape.kind, "params": list(f.shape.params)},
                    }
                )
            es = self.runner.es
            cache = es.seq_cache
            return {
                "type": "state",
                "t": round(w.sim_time, 6),
                "frames": frames,
                "attachments": [
                    {"parent": a.parent, "child": obj} for obj, a in w.state.attachments.items()
                ],
                "active_chain": es.active.id if es.active else None,
                "active_index": es.active_idx if es.active else None,
                "chain_feasible": bool(cache.verdict) if cache is not None else None,
                "status": "paused" if self.paused and es.status == "running" else es.status,
                "last_event": w.event_log[-1][1] if w.event_log else None,
            }

    def meta_frame(self) -> dict:
        scene = self.scenario.scene
        return {
            "type": "meta",
            "scenario": self.scenario.name,
            "system": self.system,
            "interference": self.interference,
            "topology": [
                {
                    "name": name,
                    "parent": scene.frames[name].parent,
                    "joint": scene.frames[name].joint,
                    "shape": {
                        "type": scene.frames[name].shape.kind,
                        "params": list(scene.frames[name].shape.params),
                    },
                }
                for name in scene.order
            ],
            "systems": list(SYSTEMS),
            "interferences": sorted(self.scenario.interferences),
        }

    @property
    def finished(self) -> bool:
        return self.runner.finished

    def outcome(self):
        return self.runner.record()


def encode_frame(frame: dict) -> str:
    """Wire encoding: one JSON object, no newlines."""
    return json.dumps(frame, separators=(",", ":"))


def parse_command(text: str) -> dict:
    cmd = json.loads(text)
    if not isinstance(cmd, dict) or "type" not in cmd:
        raise ValueError("command must be a JSON object with a 'type' field")
    return cmd


def serve(scenario: Scenario, port: int, host: str = "127.0.0.1", system: str = "fc3"):
    """Run the live-session websocket bridge (one session, one client)."""
    import asyncio

    import websockets

    session = LiveSession(scenario, system=system)
    stop = threading.Event()
    client_connected = threading.Event()

    def sim_loop():
        tau = scenario.params.tau
        while not stop.is_set():
            t0 = time.perf_counter()
            if client_connected.is_set():
                session.tick()
            remaining = tau - (time.perf_counter() - t0)
            if remaining > 0:
                time.sleep(remaining)

    sim_thread = threading.Thread(target=sim_loop, daemon=True)
    sim_thread.start()

    async def handler(ws):
        if client_connected.is_set():
            await ws.send(encode_frame({"type": "error", "message": "session busy"}))
            await ws.close()
            return
        client_connected.set()  # disconnect pauses, reconnect resumes
        log.info("client connected")
        try:
            await ws.send(encode_frame(session.meta_frame()))

            async def sender():
                while True:
                    await ws.send(encode_frame(session.state_frame()))
                    await asyncio.sleep(1.0 / 30.0)

            send_task = asyncio.ensure_future(sender())
            try:
                async for message in ws:
                    try:
                        session.submit(parse_command(message))
                    except (ValueError, KeyError) as e:
                        await ws.send(encode_frame({"type": "error", "message": str(e)}))
            finally:
                send_task.cancel()
        finally:
            client_connected.clear()
            log.info("client disconnected; session paused")

    async def main_async():
        async with websockets.serve(handler, host, port):
            log.info("serving on ws://%s:%d", host, port)
            while not stop.is_set():
                await asyncio.sleep(0.2)

    try:
        asyncio.run(main_async())
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        sim_thread.join(timeout=1.0)


# --- CLI ------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fc3", description="Control chain coordination runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run batch trials and write a CSV")
    p_run.add_argument("--scenario", required=True, help="bundled name or YAML path")
    p_run.add_argument("--system", default="fc3", choices=SYSTEMS)
    p_run.add_argument("--interference", default=None, help="e.g. I3; default: all")
    p_run.add_argument("--trials", type=int, default=5)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", default=None, help="CSV output path")
    p_run.add_argument("--timeout", type=float, default=None, help="override sim timeout [s]")
    p_run.add_argument("--workers", type=int, default=1, help="parallel trial processes")

    p_serve = sub.add_parser("serve", help="serve a live session over a websocket")
    p_serve.add_argument("--scenario", required=True)
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--system", default="fc3", choices=SYSTEMS)

    p_check = sub.add_parser("check", help="load and statically validate a scenario")
    p_check.add_argument("--scenario", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("FC3_LOG", "INFO").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    if args.command == "check":
        try:
            scenario = load_scenario(args.scenario)
        except ScenarioError as e:
            print("scenario invalid:", file=sys.stderr)
            for problem in e.problems:
                print(f"  - {problem}", file=sys.stderr)
            return 1
        print(
            f"scenario {scenario.name!r} ok: {len(scenario.scene.frames)} frames, "
            f"{len(scenario.schemas)} actions, {len(scenario.interferences)} interferences"
        )
        return 0

    if args.command == "run":
        scenario = load_scenario(args.scenario)
        interferences = [args.interference] if args.interference else None
        records, agg, csv_text = run_batch(
            [scenario],
            [args.system],
            interferences,
            trials=args.trials,
            seed=args.seed,
            out_path=args.out,
            timeout=args.timeout,
            workers=args.workers,
        )
        print(format_aggregate(agg))
        if args.out:
            print(f"wrote {len(records)} rows to {args.out}")
        else:
            print(csv_text, end="")
        return 0

    if args.command == "serve":
        scenario = load_scenario(args.scenario)
        serve(scenario, args.port, host=args.host, system=args.system)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
