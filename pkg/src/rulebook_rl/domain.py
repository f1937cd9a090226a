"""Ground-truth world model shared by every other module.

The world is a set of parallel lanes with purely longitudinal motion. Positions
are object centers in meters along the lane; gaps are bumper-to-bumper.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

EGO_LENGTH = 4.0
LANE_WIDTH = 3.5


class Kind(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1


@dataclass(frozen=True)
class SceneObject:
    id: int
    kind: Kind
    lane: int
    position: float
    speed: float
    width: float = 1.8
    height: float = 1.5
    depth: float = 4.5
    max_brake: float = 6.0

    def __post_init__(self):
        if min(self.width, self.height, self.depth) <= 0:
            raise ValueError(f"object {self.id}: dimensions must be positive")
        if not math.isfinite(self.speed) or not math.isfinite(self.position):
            raise ValueError(f"object {self.id}: non-finite kinematics")
        if self.max_brake <= 0:
            raise ValueError(f"object {self.id}: max_brake must be positive")

    @property
    def rear(self) -> float:
        return self.position - self.depth / 2


@dataclass(frozen=True)
class EgoState:
    position: float
    speed: float
    accel: float = 0.0
    lane: int = 0
    heading: float = 0.0

    def __post_init__(self):
        if self.speed < 0 or not math.isfinite(self.speed):
            raise ValueError(f"ego speed must be finite and >= 0, got {self.speed}")

    @property
    def front(self) -> float:
        return self.position + EGO_LENGTH / 2


@dataclass(frozen=True)
class VehicleParams:
    """Ego dynamics limits and rulebook constants."""

    a_max: float = 3.0
    a_min: float = 8.0
    a_brake: float = 4.0
    v_lim: float = 15.0
    dt: float = 0.1
    tau: float = 0.5
    eps: float = 0.1
    r: float = 0.8

    def __post_init__(self):
        if not self.a_min >= self.a_brake > 0:
            raise ValueError("need a_min >= a_brake > 0")
        if self.a_max <= 0 or self.v_lim <= 0 or self.dt <= 0:
            raise ValueError("a_max, v_lim and dt must be positive")
        if self.tau < self.dt:
            raise ValueError("tau must be >= dt")
        if not 0 < self.r <= 1:
            raise ValueError("r must lie in (0, 1]")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


@dataclass(frozen=True)
class WorldState:
    time: float
    ego: EgoState
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")


@dataclass(frozen=True)
class Realization:
    states: tuple[WorldState, ...]
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        for a, b in zip(self.states, self.states[1:]):
            if abs((b.time - a.time) - self.dt) > 1e-6:
                raise ValueError(
                    f"states at t={a.time} and t={b.time} are not dt={self.dt} apart")

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]


def gap(ego: EgoState, obj: SceneObject) -> float:
    """Bumper-to-bumper longitudinal distance, clamped at zero."""
    return max(0.0, obj.rear - ego.front)


def signed_gap(ego: EgoState, obj: SceneObject) -> float:
    return obj.rear - ego.front


def in_front_same_lane(ego: EgoState, obj: SceneObject) -> bool:
    return obj.lane == ego.lane and obj.position > ego.position


def prioritized_set(world: WorldState) -> list[SceneObject]:
    """Objects in the ego lane and ahead of the ego, nearest first."""
    return prioritized_objects(world.objects, world.ego)


def prioritized_objects(objects, ego: EgoState) -> list[SceneObject]:
    chosen = [o for o in objects if in_front_same_lane(ego, o)]
    chosen.sort(key=lambda o: (gap(ego, o), o.position, o.id))
    return chosen
