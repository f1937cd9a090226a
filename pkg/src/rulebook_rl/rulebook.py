"""Per-state violation functions for the four driving rules and their aggregation.

Rule order everywhere: collision, clearance, no unnecessary braking, progress.
A violation vector is a float64 numpy array of length ``N_RULES``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .domain import (
    EgoState,
    Kind,
    Realization,
    SceneObject,
    VehicleParams,
    WorldState,
    gap,
    prioritized_objects,
)

N_RULES = 4
RULE_NAMES = ("collision", "clearance", "unnecessary_brake", "progress")

# a_target values this close to zero count as zero in the progress rule
A_TARGET_TOL = 1e-9


def uses_pedestrian_branch(obj: SceneObject) -> bool:
    # oncoming objects get the full stopping distance, as pedestrians do
    return obj.kind == Kind.PEDESTRIAN or obj.speed < 0


def required_clearance(obj: SceneObject, v_e: float, params: VehicleParams) -> float:
    ego_stop = v_e ** 2 / (2 * params.a_brake)
    if uses_pedestrian_branch(obj):
        return ego_stop
    return max(0.0, ego_stop - obj.speed ** 2 / (2 * obj.max_brake))


def permissible_speed(obj: SceneObject, d: float, params: VehicleParams) -> float:
    if uses_pedestrian_branch(obj):
        return math.sqrt(2 * params.a_brake * d)
    return math.sqrt(2 * params.a_brake * (d + obj.speed ** 2 / (2 * obj.max_brake)))


def max_permissible_speed(objects: Sequence[SceneObject], ego: EgoState,
                          params: VehicleParams) -> float | None:
    """Smallest per-object permissible speed; ``None`` means unbounded (no objects)."""
    if not objects:
        return None
    return min(permissible_speed(o, gap(ego, o), params) for o in objects)


def buffer_clear(objects: Sequence[SceneObject], ego: EgoState, params: VehicleParams) -> bool:
    """True when every object is beyond clearance plus the time-buffer distance.

    Shared by the braking rule, the progress rule and the target acceleration.
    Vacuously true for an empty set.
    """
    v, tau = ego.speed, params.tau
    slack = v * tau + 0.5 * params.a_brake * tau ** 2
    return all(gap(ego, o) > required_clearance(o, v, params) + slack for o in objects)


def target_accel(world: WorldState, params: VehicleParams) -> float:
    return _target_accel(prioritized_objects(world.objects, world.ego), world.ego, params)


def _target_accel(prio, ego: EgoState, params: VehicleParams) -> float:
    if not prio:
        return min(params.a_max, (params.v_lim - ego.speed) / params.dt)
    if buffer_clear(prio, ego, params):
        v_max = max_permissible_speed(prio, ego, params)
        return min(params.a_max, (v_max - params.a_brake * params.dt - ego.speed) / params.dt)
    return 0.0


def rb1(world: WorldState, params: VehicleParams) -> float:
    ego = world.ego
    hits = sum(1 for o in prioritized_objects(world.objects, ego) if gap(ego, o) < params.eps)
    return hits * ego.speed ** 2


def rb2(world: WorldState, params: VehicleParams) -> float:
    ego = world.ego
    total = 0.0
    for o in prioritized_objects(world.objects, ego):
        total += max(0.0, required_clearance(o, ego.speed, params) - gap(ego, o))
    return total


def rb3(world: WorldState, params: VehicleParams) -> float:
    prio = prioritized_objects(world.objects, world.ego)
    if buffer_clear(prio, world.ego, params):
        return max(0.0, -world.ego.accel)
    return 0.0


def rb4(world: WorldState, params: VehicleParams) -> float:
    a_t = target_accel(world, params)
    if a_t <= A_TARGET_TOL:
        return 0.0
    return max(params.r - world.ego.accel / a_t, 0.0)


def score_state(world: WorldState, params: VehicleParams) -> np.ndarray:
    return np.array([rb1(world, params), rb2(world, params),
                     rb3(world, params), rb4(world, params)])


def score_states(states: Sequence[WorldState], params: VehicleParams) -> np.ndarray:
    """Per-state violations, shape ``(len(states), N_RULES)``."""
    out = np.zeros((len(states), N_RULES))
    for i, s in enumerate(states):
        out[i] = score_state(s, params)
    return out


def _states(x) -> tuple[WorldState, ...]:
    return x.states if isinstance(x, Realization) else tuple(x)


def score_realization(x, params: VehicleParams) -> np.ndarray:
    states = _states(x)
    if not states:
        raise ValueError("empty realization")
    return score_states(states, params).sum(axis=0)


def score_suffix(x, t: int, params: VehicleParams) -> np.ndarray:
    states = _states(x)
    if not 0 <= t < len(states):
        raise IndexError(f"suffix start {t} outside realization of length {len(states)}")
    return score_realization(states[t:], params)


def suffix_totals(per_state: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Discounted suffix sums of a per-state violation table.

    Row ``t`` holds ``sum_{s >= t} gamma**(s - t) * per_state[s]``.
    """
    out = np.zeros_like(per_state)
    acc = np.zeros(per_state.shape[1:])
    for t in range(len(per_state) - 1, -1, -1):
        acc = per_state[t] + gamma * acc
        out[t] = acc
    return out
