"""Independent brute-force rule evaluator used as a test oracle.

Written from the rule formulas directly on plain tuples; it imports nothing
from the package so that a shared bug cannot hide in both implementations.
An object is ``(kind, lane, center, depth, speed, max_brake)`` with kind
"veh" or "ped"; the ego is ``(lane, center, speed, accel)`` with length 4.
"""
import math

EGO_LEN = 4.0


def _front_objects(ego, objs):
    lane, center, _, _ = ego
    return [o for o in objs if o[1] == lane and o[2] > center]


def _d(ego, o):
    return max(0.0, (o[2] - o[3] / 2) - (ego[1] + EGO_LEN / 2))


def _ped_like(o):
    return o[0] == "ped" or o[4] < 0


def _c(o, ve, p):
    if _ped_like(o):
        return ve * ve / (2 * p["a_brake"])
    return max(0.0, ve * ve / (2 * p["a_brake"]) - o[4] * o[4] / (2 * o[5]))


def _vmax_i(o, d, p):
    if _ped_like(o):
        return math.sqrt(2 * p["a_brake"] * d)
    return math.sqrt(2 * p["a_brake"] * (d + o[4] * o[4] / (2 * o[5])))


def _far(ego, objs, p):
    ve, tau = ego[2], p["tau"]
    for o in objs:
        if not _d(ego, o) > _c(o, ve, p) + ve * tau + 0.5 * p["a_brake"] * tau * tau:
            return False
    return True


def oracle_scores(ego, objs, p):
    O = _front_objects(ego, objs)
    ve, ae = ego[2], ego[3]
    r1 = 0.0
    for o in O:
        if _d(ego, o) < p["eps"]:
            r1 += ve * ve
    r2 = 0.0
    for o in O:
        gap_short = _c(o, ve, p) - _d(ego, o)
        if gap_short > 0:
            r2 += gap_short
    r3 = max(0.0, -ae) if _far(ego, O, p) else 0.0
    if len(O) == 0:
        a_t = min(p["a_max"], (p["v_lim"] - ve) / p["dt"])
    elif _far(ego, O, p):
        vm = min(_vmax_i(o, _d(ego, o), p) for o in O)
        a_t = min(p["a_max"], (vm - p["a_brake"] * p["dt"] - ve) / p["dt"])
    else:
        a_t = 0.0
    r4 = max(p["r"] - ae / a_t, 0.0) if a_t > 1e-9 else 0.0
    return [r1, r2, r3, r4]
