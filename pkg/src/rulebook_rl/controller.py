"""Longitudinal RSS-style controller and the closed-loop compliance check."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .domain import EgoState, Kind, SceneObject, VehicleParams, WorldState, prioritized_objects
from .rulebook import max_permissible_speed, score_state


@dataclass(frozen=True)
class ControlCommand:
    accel: float


def ctrl(perceived: Sequence[SceneObject], probs, sys: EgoState,
         params: VehicleParams) -> ControlCommand:
    """Acceleration command from the perceived environment.

    ``probs`` is accepted for interface compatibility and ignored. Branches are
    tried in order: empty road, overspeed, following. The result is clamped to
    ``[-a_min, a_max]``.
    """
    prio = prioritized_objects(perceived, sys)
    if not prio:
        a = min(params.a_max, (params.v_lim - sys.speed) / params.dt)
    elif sys.speed > params.v_lim:
        a = -params.a_min
    else:
        v_max = max_permissible_speed(prio, sys, params)
        a = min(params.a_max, (v_max - params.a_brake * params.dt - sys.speed) / params.dt)
    return ControlCommand(float(np.clip(a, -params.a_min, params.a_max)))


def ground_truth_control(world: WorldState, params: VehicleParams) -> ControlCommand:
    return ctrl(world.objects, None, world.ego, params)


class AssumptionViolation(ValueError):
    """A closed-loop precondition (compliant start or safety assumption) failed."""


def check_step_assumptions(prev: WorldState, cur: WorldState, params: VehicleParams,
                            behaviors=None) -> None:
    """Raise if the step ``prev -> cur`` breaks a safety assumption."""
    o_prev = [o.id for o in prioritized_objects(prev.objects, prev.ego)]
    o_cur = [o.id for o in prioritized_objects(cur.objects, cur.ego)]
    if sorted(o_prev) != sorted(o_cur):
        raise AssumptionViolation(
            f"t={cur.time:.2f}: prioritized set changed {o_prev} -> {o_cur}")
    check_state_assumptions(cur, params)
    before = {o.id: o for o in prev.objects}
    for o in cur.objects:
        p = before.get(o.id)
        if p is None or o.id not in o_cur:
            continue
        decel = (abs(p.speed) - abs(o.speed)) / params.dt
        if decel > o.max_brake + 1e-9:
            raise AssumptionViolation(
                f"t={cur.time:.2f}: object {o.id} braked at {decel:.3f} > {o.max_brake}")


def check_state_assumptions(world: WorldState, params: VehicleParams) -> None:
    if world.ego.speed > params.v_lim + 1e-9:
        raise AssumptionViolation(
            f"t={world.time:.2f}: ego speed {world.ego.speed:.4f} exceeds v_lim")
    for o in prioritized_objects(world.objects, world.ego):
        if o.speed < 0:
            raise AssumptionViolation(f"t={world.time:.2f}: object {o.id} moves toward ego")
        if o.kind == Kind.VEHICLE and o.max_brake < params.a_brake:
            raise AssumptionViolation(f"object {o.id}: max_brake below ego a_brake")


def closed_loop_check(initial: WorldState, horizon: int, params: VehicleParams,
                      behaviors: Mapping | None = None) -> np.ndarray:
    """Roll the world forward under ground-truth control and total the violations.

    ``behaviors`` maps object id to a simulator behavior; missing ids keep constant
    speed. Raises ``AssumptionViolation`` when the compliant start or any safety
    assumption fails along the way.
    """
    from .simulator import step  # simulator depends on this module

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    world = initial
    total = np.zeros(4)
    check_state_assumptions(world, params)
    prev = None
    for t in range(horizon):
        u = ground_truth_control(world, params)
        x_t = replace(world, ego=replace(world.ego, accel=u.accel))
        if prev is not None:
            check_step_assumptions(prev, x_t, params)
        v = score_state(x_t, params)
        if t == 0 and np.any(v != 0):
            raise AssumptionViolation(f"initial state is not compliant: {v.tolist()}")
        total += v
        prev = x_t
        world = step(x_t, u, params, behaviors)
    return total
