"""Handcrafted states covering every rule branch, in the oracle's tuple form.

Ego ``(lane, center, speed, accel)``; object ``(kind, lane, center, depth, speed, max_brake)``.
Each case lists the branches it is meant to exercise.
"""
from rulebook_rl.domain import EgoState, Kind, SceneObject, VehicleParams, WorldState

BASE = dict(a_max=3.0, a_min=8.0, a_brake=4.0, v_lim=15.0, dt=0.1, tau=0.5, eps=0.1, r=0.8)

CASES = [
    ("empty, cruising below limit, accelerating", (0, 0.0, 10.0, 3.0), [], {},
     {"O_empty", "rb3_vacuous", "rb4_empty"}),
    ("empty, braking", (0, 0.0, 10.0, -2.0), [], {}, {"O_empty", "rb3_vacuous"}),
    ("empty, at limit", (0, 0.0, 15.0, 0.0), [], {}, {"O_empty", "rb4_zero_target"}),
    ("empty, slow accel, progress shortfall", (0, 0.0, 5.0, 1.0), [], {},
     {"O_empty", "rb4_empty"}),
    ("only adjacent-lane traffic", (0, 0.0, 12.0, -1.0),
     [("veh", 1, 10.0, 4.0, 5.0, 6.0)], {}, {"O_empty", "rb3_vacuous"}),
    ("object behind in lane ignored", (0, 0.0, 12.0, 0.0),
     [("veh", 0, -20.0, 4.0, 12.0, 6.0)], {}, {"O_empty"}),
    ("vehicle far ahead, accelerating", (0, 0.0, 10.0, 2.0),
     [("veh", 0, 80.0, 4.0, 10.0, 6.0)], {}, {"c_vehicle", "vmax_vehicle", "rb4_far"}),
    ("vehicle far ahead, braking", (0, 0.0, 10.0, -3.0),
     [("veh", 0, 80.0, 4.0, 10.0, 6.0)], {}, {"c_vehicle", "rb3_far"}),
    ("vehicle close, clearance shortfall", (0, 0.0, 20.0, -3.0),
     [("veh", 0, 34.0, 4.0, 10.0, 5.0)], {}, {"c_vehicle", "rb2", "rb4_near"}),
    ("vehicle exactly at clearance", (0, 0.0, 20.0, 0.0),
     [("veh", 0, 44.0, 4.0, 10.0, 5.0)], {}, {"c_vehicle", "rb2_boundary"}),
    ("faster lead, zero clearance", (0, 0.0, 8.0, 0.0),
     [("veh", 0, 10.0, 4.0, 20.0, 6.0)], {}, {"c_vehicle_zero"}),
    ("pedestrian ahead, clear", (0, 0.0, 10.0, 1.0),
     [("ped", 0, 60.0, 0.5, 1.5, 3.0)], {}, {"c_ped", "vmax_ped", "rb4_far"}),
    ("pedestrian inside clearance", (0, 0.0, 10.0, -4.0),
     [("ped", 0, 8.0, 0.5, 0.0, 3.0)], {}, {"c_ped", "rb2", "rb4_near"}),
    ("collision with vehicle", (0, 0.0, 10.0, -8.0),
     [("veh", 0, 4.05, 4.0, 9.0, 6.0)], {}, {"rb1", "rb2"}),
    ("double collision", (0, 0.0, 5.0, -8.0),
     [("veh", 0, 4.02, 4.0, 3.0, 6.0), ("ped", 0, 2.2, 0.5, 0.5, 3.0)], {}, {"rb1"}),
    ("gap exactly eps is not a collision", (0, 0.0, 5.0, 0.0),
     [("veh", 0, 4.125, 4.0, 5.0, 6.0)], {"eps": 0.125}, {"rb1_boundary"}),
    ("oncoming vehicle uses pedestrian branch", (0, 0.0, 10.0, 0.0),
     [("veh", 0, 30.0, 4.0, -5.0, 6.0)], {}, {"c_ped", "vmax_ped", "rb2"}),
    ("oncoming far, progress", (0, 0.0, 6.0, 0.5),
     [("veh", 0, 120.0, 4.0, -3.0, 6.0)], {}, {"c_ped", "vmax_ped", "rb4_far"}),
    ("mixed set, one near, one far", (0, 0.0, 12.0, -1.0),
     [("veh", 0, 70.0, 4.0, 10.0, 6.0), ("ped", 0, 25.0, 0.5, 1.0, 3.0)], {},
     {"c_vehicle", "c_ped", "rb4_near", "rb2"}),
    ("mixed set, both far", (0, 0.0, 8.0, 1.0),
     [("veh", 0, 90.0, 4.0, 10.0, 6.0), ("ped", 0, 60.0, 0.5, 1.0, 3.0)], {},
     {"vmax_vehicle", "vmax_ped", "rb4_far"}),
    ("far lead, permissible speed below current", (0, 0.0, 14.0, 0.0),
     [("ped", 0, 40.0, 0.5, 0.0, 3.0)], {}, {"rb4_zero_target", "vmax_ped"}),
    ("stationary ego, far lead", (0, 0.0, 0.0, 0.0),
     [("veh", 0, 30.0, 4.0, 0.0, 6.0)], {}, {"rb4_far", "vmax_vehicle"}),
    ("ego in lane 2", (2, 10.0, 9.0, -1.5),
     [("veh", 2, 100.0, 4.0, 9.0, 6.0), ("veh", 1, 20.0, 4.0, 9.0, 6.0)], {},
     {"rb3_far", "c_vehicle"}),
    ("tight buffer, braking justified", (0, 0.0, 10.0, -3.0),
     [("veh", 0, 24.0, 4.0, 10.0, 6.0)], {}, {"rb3_buffer_false", "rb4_near"}),
    ("full throttle, r=1", (0, 0.0, 5.0, 3.0), [], {"r": 1.0}, {"rb4_full"}),
]


def to_params(over):
    return VehicleParams(**{**BASE, **over})


def to_world(ego, objs):
    lane, center, speed, accel = ego
    out = []
    for i, (kind, olane, ocenter, depth, speed_i, mb) in enumerate(objs):
        out.append(SceneObject(id=i + 1, kind=Kind.VEHICLE if kind == "veh" else Kind.PEDESTRIAN,
                               lane=olane, position=ocenter, speed=speed_i, depth=depth,
                               max_brake=mb))
    return WorldState(0.0, EgoState(center, speed, accel, lane), tuple(out))
