"""Line-delimited JSON trajectory logs.

Line 1 is a header object::

    {"format": "rulebook-rl-trajectory", "version": 1, "seed": int, "fog": float,
     "n_slots": int, "vehicle": {VehicleParams fields}}

Every following line is one timestep::

    {"t": step index, "time": s,
     "ego": {"position", "speed", "accel", "lane", "heading"},
     "objects": [{"id", "kind", "lane", "position", "speed",
                  "width", "height", "depth", "max_brake"}, ...],
     "slots": [null | {"noisy_gap", "noisy_speed", "noisy_lane_offset",
                       "class_evidence", "source_id"}, ...],
     "tokens": [[int, ...] per detection],
     "token_probs": [[float, ...] per detection],
     "accel": applied command,
     "violations": [rb1, rb2, rb3, rb4] of this state}

``kind`` is the class name (``VEHICLE`` / ``PEDESTRIAN``). Floats are written
with shortest round-trip repr, so parsing a log reproduces every value exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domain import EgoState, Kind, SceneObject, VehicleParams, WorldState
from .simulator import SensorFrame, SensorReading, TrajectoryRecord

LOG_FORMAT = "rulebook-rl-trajectory"
LOG_VERSION = 1


class LogFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _object_dict(o: SceneObject) -> dict:
    d = asdict(o)
    d["kind"] = Kind(o.kind).name
    return d


def _ego_dict(e: EgoState) -> dict:
    return asdict(e)


def header(record: TrajectoryRecord, params: VehicleParams, n_slots: int) -> dict:
    return {"format": LOG_FORMAT, "version": LOG_VERSION, "seed": int(record.seed),
            "fog": float(record.fog), "n_slots": int(n_slots), "vehicle": asdict(params)}


def step_dicts(record: TrajectoryRecord):
    for t, (x, frame, det, u) in enumerate(zip(record.states, record.frames,
                                                record.detections, record.controls)):
        yield {
            "t": t,
            "time": x.time,
            "ego": _ego_dict(x.ego),
            "objects": [_object_dict(o) for o in x.objects],
            "slots": [None if r is None else asdict(r) for r in frame.slots],
            "tokens": [list(tk) for tk in det.tokens],
            "token_probs": [list(p) for p in det.token_probs],
            "accel": float(u),
            "violations": [float(v) for v in record.violations[t]],
        }


def dumps(record: TrajectoryRecord, params: VehicleParams, n_slots: int) -> str:
    lines = [json.dumps(header(record, params, n_slots), sort_keys=True)]
    lines += [json.dumps(d, sort_keys=True) for d in step_dicts(record)]
    return "\n".join(lines) + "\n"


def write(path, record: TrajectoryRecord, params: VehicleParams, n_slots: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(record, params, n_slots))
    tmp.replace(path)


@dataclass
class ParsedLog:
    header: dict
    params: VehicleParams
    states: list[WorldState]
    frames: list[SensorFrame]
    tokens: list[list[tuple[int, ...]]]
    token_probs: list[list[tuple[float, ...]]]
    controls: list[float]
    violations: np.ndarray


def _require(d: dict, keys, line: int, what: str):
    if not isinstance(d, dict):
        raise LogFormatError(line, f"{what} must be an object")
    missing = [k for k in keys if k not in d]
    if missing:
        raise LogFormatError(line, f"{what} is missing {', '.join(missing)}")


def _parse_step(d: dict, line: int, n_slots: int):
    _require(d, ("t", "time", "ego", "objects", "slots", "tokens", "token_probs",
                 "accel", "violations"), line, "step record")
    try:
        ego = EgoState(**d["ego"])
        objs = []
        for od in d["objects"]:
            od = dict(od)
            od["kind"] = Kind[od["kind"]]
            objs.append(SceneObject(**od))
        world = WorldState(d["time"], ego, tuple(objs))
        slots = tuple(None if s is None else SensorReading(**s) for s in d["slots"])
    except (TypeError, KeyError, ValueError) as exc:
        raise LogFormatError(line, f"bad step record: {exc}") from exc
    if len(slots) != n_slots:
        raise LogFormatError(line, f"expected {n_slots} slots, found {len(slots)}")
    viol = d["violations"]
    if not isinstance(viol, list) or len(viol) != 4:
        raise LogFormatError(line, "violations must list 4 values")
    return (world, SensorFrame(slots, 0.0), [tuple(t) for t in d["tokens"]],
            [tuple(p) for p in d["token_probs"]], float(d["accel"]),
            [float(v) for v in viol])


def parse(text: str) -> ParsedLog:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise LogFormatError(1, "empty log")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogFormatError(1, f"malformed header: {exc.msg}") from exc
    _require(head, ("format", "version", "vehicle", "n_slots", "fog", "seed"), 1, "header")
    if head["format"] != LOG_FORMAT:
        raise LogFormatError(1, f"not a trajectory log (format {head['format']!r})")
    if head["version"] != LOG_VERSION:
        raise LogFormatError(1, f"unsupported log version {head['version']}")
    try:
        params = VehicleParams(**head["vehicle"])
    except (TypeError, ValueError) as exc:
        raise LogFormatError(1, f"bad vehicle parameters: {exc}") from exc
    n_slots = int(head["n_slots"])
    states, frames, tokens, probs, controls, viols = [], [], [], [], [], []
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            raise LogFormatError(i, "blank line")
        try:
            d = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise LogFormatError(i, f"malformed record: {exc.msg}") from exc
        world, frame, tk, pr, u, v = _parse_step(d, i, n_slots)
        if d["t"] != len(states):
            raise LogFormatError(i, f"step index {d['t']} out of order, expected {len(states)}")
        states.append(world)
        frames.append(SensorFrame(frame.slots, float(head["fog"])))
        tokens.append(tk)
        probs.append(pr)
        controls.append(u)
        viols.append(v)
    if not states:
        raise LogFormatError(len(lines), "log has no step records")
    for i, (a, b) in enumerate(zip(states, states[1:]), start=3):
        if not math.isclose(b.time - a.time, params.dt, abs_tol=1e-6):
            raise LogFormatError(i, "states are not one time step apart")
    return ParsedLog(head, params, states, frames, tokens, probs, controls,
                     np.array(viols, dtype=float).reshape(-1, 4))


def read(path) -> ParsedLog:
    return parse(Path(path).read_text())
