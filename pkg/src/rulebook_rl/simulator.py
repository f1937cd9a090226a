"""Fixed-step longitudinal simulator, scenario spawning and the fog sensor model."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .domain import (
    EGO_LENGTH,
    EgoState,
    Kind,
    SceneObject,
    VehicleParams,
    WorldState,
    signed_gap,
)
from .rulebook import score_states

SENSOR_RANGE = 128.0
DESPAWN_BEHIND = 60.0
DESPAWN_AHEAD = 250.0

VEHICLE_DIMS = (1.8, 1.5, 4.5)
PEDESTRIAN_DIMS = (0.5, 1.8, 0.5)
VEHICLE_MAX_BRAKE = 6.0
PEDESTRIAN_MAX_BRAKE = 3.0


class BehaviorKind(enum.IntEnum):
    CONSTANT_SPEED = 0
    RANDOM_BRAKE = 1
    STATIONARY = 2


@dataclass(frozen=True)
class Behavior:
    """Exogenous object motion: one commanded acceleration per simulation step.

    Accelerations act along the direction of travel and never stop-and-reverse
    the object. Steps past the end of the schedule coast at constant speed.
    """

    kind: BehaviorKind
    accels: tuple[float, ...] = ()

    def accel_at(self, k: int) -> float:
        if self.kind == BehaviorKind.STATIONARY or k >= len(self.accels):
            return 0.0
        return self.accels[k]


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_lanes: int = 3
    n_objects: int = 6
    kind_mix: tuple[float, float] = (0.7, 0.3)
    fog_density: float = 0.0
    horizon: int = 100
    dt: float = 0.1
    behavior_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    lead_probability: float = 0.9
    compliant: bool = True
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "kind_mix", tuple(float(p) for p in self.kind_mix))
        object.__setattr__(self, "behavior_mix", tuple(float(p) for p in self.behavior_mix))
        for name in ("kind_mix", "behavior_mix"):
            probs = getattr(self, name)
            if min(probs) < 0 or abs(sum(probs) - 1) > 1e-9:
                raise ValueError(f"{name} must be non-negative and sum to 1")
        if len(self.kind_mix) != 2 or len(self.behavior_mix) != 3:
            raise ValueError("kind_mix needs 2 entries, behavior_mix needs 3")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.fog_density <= 100:
            raise ValueError("fog_density must lie in [0, 100]")
        if self.n_lanes < 1 or self.n_objects < 0:
            raise ValueError("n_lanes must be >= 1 and n_objects >= 0")
        if not 0 <= self.lead_probability <= 1:
            raise ValueError("lead_probability must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseModel:
    sigma_gap0: float = 0.8
    sigma_speed0: float = 0.8
    sigma_lane0: float = 0.1
    sigma_class0: float = 0.15
    miss0: float = 0.05
    fog_sigma_scale: float = 20.0
    fog_miss_scale: float = 100.0
    max_miss: float = 0.9

    def __post_init__(self):
        vals = (self.sigma_gap0, self.sigma_speed0, self.sigma_lane0,
                self.sigma_class0, self.miss0)
        if min(vals) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.fog_sigma_scale <= 0 or self.fog_miss_scale <= 0:
            raise ValueError("fog scales must be positive")
        if not 0 <= self.max_miss <= 0.9:
            raise ValueError("max_miss must lie in [0, 0.9]")

    def sigma_factor(self, fog: float) -> float:
        return 1.0 + fog / self.fog_sigma_scale

    def miss_probability(self, fog: float) -> float:
        return min(self.miss0 + fog / self.fog_miss_scale, self.max_miss)


@dataclass(frozen=True)
class SensorReading:
    noisy_gap: float
    noisy_speed: float
    noisy_lane_offset: float
    class_evidence: float
    # provenance for reward assignment; perception never reads it
    source_id: int = -1


@dataclass(frozen=True)
class SensorFrame:
    slots: tuple[SensorReading | None, ...]
    fog: float = 0.0

    def __len__(self):
        return len(self.slots)


@dataclass(frozen=True)
class Scenario:
    initial: WorldState
    behaviors: Mapping[int, Behavior]
    config: ScenarioConfig


# ---------------------------------------------------------------- dynamics

def _advance(speed: float, accel: float, dt: float) -> tuple[float, float]:
    """(displacement, new speed) for |speed| under accel along the motion, no reversal."""
    direction = -1.0 if speed < 0 else 1.0
    v = abs(speed)
    v_new = v + accel * dt
    if v_new < 0:
        disp = v * v / (2 * -accel)
        v_new = 0.0
    else:
        disp = v * dt + 0.5 * accel * dt * dt
    return direction * disp, direction * v_new


def step(world: WorldState, u, params: VehicleParams,
         behaviors: Mapping[int, Behavior] | None = None) -> WorldState:
    """Advance one fixed step. ``u`` is a ControlCommand or a float acceleration."""
    a = float(getattr(u, "accel", u))
    a = min(max(a, -params.a_min), params.a_max)
    dt = params.dt
    k = int(round(world.time / dt))
    disp, v_new = _advance(world.ego.speed, a, dt)
    ego = replace(world.ego, position=world.ego.position + disp, speed=v_new, accel=a)
    objects = []
    for o in world.objects:
        beh = behaviors.get(o.id) if behaviors else None
        acc = beh.accel_at(k) if beh is not None else 0.0
        if beh is not None and beh.kind == BehaviorKind.STATIONARY:
            moved = o
        else:
            d, v = _advance(o.speed, acc, dt)
            moved = replace(o, position=o.position + d, speed=v)
        rel = moved.position - ego.position
        if -DESPAWN_BEHIND <= rel <= DESPAWN_AHEAD:
            objects.append(moved)
    return WorldState(time=round((k + 1) * dt, 9), ego=ego, objects=tuple(objects))


# ---------------------------------------------------------------- spawning

def _make_object(oid: int, kind: Kind, lane: int, position: float, speed: float) -> SceneObject:
    if kind == Kind.VEHICLE:
        w, h, d = VEHICLE_DIMS
        mb = VEHICLE_MAX_BRAKE
    else:
        w, h, d = PEDESTRIAN_DIMS
        mb = PEDESTRIAN_MAX_BRAKE
    return SceneObject(id=oid, kind=kind, lane=lane, position=position, speed=speed,
                       width=w, height=h, depth=d, max_brake=mb)


def _random_brake_schedule(rng, speed: float, max_brake: float, horizon: int,
                           floor: float, dt: float) -> tuple[float, ...]:
    """Cruise / brake / recover cycles, never braking below ``floor`` m/s."""
    cruise = abs(speed)
    v = cruise
    accels = []
    mode, left, rate = "cruise", 0, 0.0
    for _ in range(horizon):
        if mode == "cruise" and rng.random() < 0.04:
            mode, left = "brake", int(rng.integers(5, 25))
            rate = float(rng.uniform(1.0, max_brake))
        if mode == "brake":
            a = -min(rate, max(0.0, (v - floor) / dt))
            left -= 1
            if left <= 0 or v <= floor:
                mode = "recover"
        elif mode == "recover":
            a = min(1.0, (cruise - v) / dt)
            if v + a * dt >= cruise - 1e-9:
                mode = "cruise"
        else:
            a = 0.0
        accels.append(float(a))
        v = max(0.0, v + a * dt)
    return tuple(accels)


def _draw_kind(rng, config: ScenarioConfig) -> Kind:
    return Kind.VEHICLE if rng.random() < config.kind_mix[0] else Kind.PEDESTRIAN


def _draw_behavior(rng, config: ScenarioConfig) -> BehaviorKind:
    return BehaviorKind(int(rng.choice(3, p=config.behavior_mix)))


def _lead(rng, oid: int, config: ScenarioConfig, params: VehicleParams, ego: EgoState):
    """An ego-lane object moving away from the ego, placed within clearance bounds."""
    kind = _draw_kind(rng, config)
    if kind == Kind.VEHICLE:
        lo = min(4.0, 0.3 * params.v_lim)
        speed = float(rng.uniform(lo, max(lo, params.v_lim - 1.0)))
        beh = _draw_behavior(rng, config)
        if beh == BehaviorKind.STATIONARY:
            beh = BehaviorKind.CONSTANT_SPEED
    else:
        speed = float(rng.uniform(1.2, 2.0))
        beh = BehaviorKind.CONSTANT_SPEED
    obj = _make_object(oid, kind, 0, 0.0, speed)
    # keep the permissible speed near the limit so the ego never needs to exceed it
    credit = 0.0 if kind == Kind.PEDESTRIAN else speed ** 2 / (2 * obj.max_brake)
    v_cap = params.v_lim + params.a_brake * params.dt
    d_hi = v_cap ** 2 / (2 * params.a_brake) - credit
    clearance = max(0.0, ego.speed ** 2 / (2 * params.a_brake) - credit)
    d_lo = clearance + 0.5
    if d_hi <= d_lo:
        return None, None
    d = float(rng.uniform(d_lo, d_hi))
    obj = replace(obj, position=ego.front + d + obj.depth / 2)
    if beh == BehaviorKind.RANDOM_BRAKE:
        behavior = Behavior(beh, _random_brake_schedule(
            rng, speed, obj.max_brake, config.horizon, floor=3.0, dt=config.dt))
    else:
        behavior = Behavior(beh)
    return obj, behavior


def _traffic(rng, oid: int, config: ScenarioConfig, ego: EgoState):
    """An object in a non-ego lane (or anywhere, when compliance is not required)."""
    lanes = list(range(1, config.n_lanes)) if config.compliant else list(range(config.n_lanes))
    if not lanes:
        return None, None
    lane = int(rng.choice(lanes))
    kind = _draw_kind(rng, config)
    beh = _draw_behavior(rng, config)
    oncoming = config.n_lanes >= 3 and lane == config.n_lanes - 1
    if beh == BehaviorKind.STATIONARY:
        speed = 0.0
    elif kind == Kind.VEHICLE:
        speed = float(rng.uniform(4.0, 15.0))
    else:
        speed = float(rng.uniform(0.5, 2.0))
    if oncoming:
        speed = -speed
        if beh == BehaviorKind.RANDOM_BRAKE:
            beh = BehaviorKind.CONSTANT_SPEED
    obj = _make_object(oid, kind, lane, 0.0, speed)
    d = float(rng.uniform(-20.0, 110.0))
    obj = replace(obj, position=ego.front + d + obj.depth / 2)
    if beh == BehaviorKind.RANDOM_BRAKE:
        behavior = Behavior(beh, _random_brake_schedule(
            rng, speed, obj.max_brake, config.horizon, floor=0.0, dt=config.dt))
    else:
        behavior = Behavior(beh)
    return obj, behavior


def _candidate(rng, config: ScenarioConfig, params: VehicleParams) -> Scenario:
    ego = EgoState(position=0.0, speed=float(rng.uniform(0.0, params.v_lim)))
    objects, behaviors = [], {}
    oid = 1
    if config.n_objects > 0 and rng.random() < config.lead_probability:
        obj, beh = _lead(rng, oid, config, params, ego)
        if obj is not None:
            objects.append(obj)
            behaviors[oid] = beh
            oid += 1
    while len(objects) < config.n_objects:
        obj, beh = _traffic(rng, oid, config, ego)
        if obj is None:
            break
        objects.append(obj)
        behaviors[oid] = beh
        oid += 1
    return Scenario(WorldState(0.0, ego, tuple(objects)), behaviors, config)


def spawn(config: ScenarioConfig, params: VehicleParams | None = None) -> Scenario:
    """Draw a scenario deterministically from ``config.seed``.

    In compliant mode a candidate is kept only if the ground-truth closed loop
    meets every safety assumption over the horizon (stable prioritized set, ego
    within the speed limit, bounded object braking) and starts violation-free.
    """
    from .controller import AssumptionViolation, closed_loop_check, ground_truth_control

    params = params or VehicleParams(dt=config.dt)
    rng = np.random.default_rng([config.seed, 0x5EED])
    for _ in range(config.max_retries):
        scenario = _candidate(rng, config, params)
        if not config.compliant:
            return scenario
        try:
            closed_loop_check(scenario.initial, config.horizon, params, scenario.behaviors)
        except AssumptionViolation:
            continue
        # the initial state carries the command the controller applies to it
        u = ground_truth_control(scenario.initial, params)
        ego = replace(scenario.initial.ego, accel=u.accel)
        return replace(scenario, initial=replace(scenario.initial, ego=ego))
    raise RuntimeError(
        f"could not place a compliant scenario for seed {config.seed} "
        f"after {config.max_retries} attempts")


# ---------------------------------------------------------------- sensing

def visible_objects(world: WorldState, n_slots: int = 8) -> list[SceneObject]:
    """Objects the sensor can report: ahead within range, nearest ``n_slots`` first."""
    ego = world.ego
    seen = [(signed_gap(ego, o), o.id, o) for o in world.objects]
    seen = [item for item in seen if 0.0 <= item[0] <= SENSOR_RANGE]
    seen.sort(key=lambda item: (item[0], item[1]))
    return [o for _, _, o in seen[:n_slots]]


def sense(world: WorldState, noise: NoiseModel, rng, n_slots: int = 8,
          fog: float = 0.0) -> SensorFrame:
    """Noisy forward-looking readings, one object per slot, slots shuffled."""
    ego = world.ego
    k = noise.sigma_factor(fog)
    p_miss = noise.miss_probability(fog)
    readings = []
    for o in visible_objects(world, n_slots):
        g = signed_gap(ego, o)
        z = rng.standard_normal(4)
        dropped = rng.random() < p_miss
        if dropped:
            continue
        evidence = (1.0 if o.kind == Kind.VEHICLE else 0.0) + noise.sigma_class0 * k * z[3]
        readings.append(SensorReading(
            noisy_gap=g + noise.sigma_gap0 * k * z[0],
            noisy_speed=o.speed + noise.sigma_speed0 * k * z[1],
            noisy_lane_offset=(o.lane - ego.lane) + noise.sigma_lane0 * k * z[2],
            class_evidence=float(min(1.0, max(0.0, evidence))),
            source_id=o.id,
        ))
    slots: list[SensorReading | None] = [None] * n_slots
    order = rng.permutation(n_slots)
    for reading, idx in zip(readings, order):
        slots[int(idx)] = reading
    return SensorFrame(tuple(slots), fog=float(fog))


# ---------------------------------------------------------------- episodes

@dataclass
class TrajectoryRecord:
    states: list[WorldState]
    frames: list[SensorFrame]
    detections: list  # DetectionSequence per step
    controls: list[float]
    violations: np.ndarray  # (T, 4) per-state rule scores
    seed: int = 0
    fog: float = 0.0

    def __len__(self):
        return len(self.states)

    @property
    def totals(self) -> np.ndarray:
        return self.violations.sum(axis=0)


def episode_rngs(seed: int):
    """Independent sensor and policy generators for one episode."""
    s_sense, s_policy = np.random.SeedSequence([seed, 0xE915]).spawn(2)
    return np.random.default_rng(s_sense), np.random.default_rng(s_policy)


def run_episode(scenario: Scenario, perception: Callable, controller: Callable,
                params: VehicleParams, noise: NoiseModel | None = None,
                n_slots: int = 8, seed: int | None = None,
                fog: float | None = None) -> TrajectoryRecord:
    """Sense, detect, control, record, step; then score every recorded state.

    ``perception(frame, world, rng)`` returns a detection with ``objects`` and
    ``probs``; ``controller(objects, probs, ego, params)`` returns a command.
    """
    noise = noise or NoiseModel()
    cfg = scenario.config
    seed = cfg.seed if seed is None else seed
    fog = cfg.fog_density if fog is None else fog
    sense_rng, policy_rng = episode_rngs(seed)
    world = scenario.initial
    states, frames, dets, controls = [], [], [], []
    for _ in range(cfg.horizon):
        frame = sense(world, noise, sense_rng, n_slots=n_slots, fog=fog)
        det = perception(frame, world, policy_rng)
        u = controller(det.objects, det.probs, world.ego, params)
        x_t = replace(world, ego=replace(world.ego, accel=u.accel))
        states.append(x_t)
        frames.append(frame)
        dets.append(det)
        controls.append(u.accel)
        world = step(x_t, u, params, scenario.behaviors)
    return TrajectoryRecord(states, frames, dets, controls,
                            score_states(states, params), seed=seed, fog=fog)
