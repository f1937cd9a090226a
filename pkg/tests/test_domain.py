import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ped, veh, world
from rulebook_rl.domain import (
    EGO_LENGTH,
    EgoState,
    Realization,
    SceneObject,
    VehicleParams,
    WorldState,
    gap,
    prioritized_set,
)


def test_prioritized_set_selects_same_lane_ahead():
    a, b, c = veh(1, 0, 30, 5), veh(2, 1, 10, 5), veh(3, 0, -5, 5)
    assert prioritized_set(world(objects=[a, b, c])) == [a]


def test_prioritized_set_empty_world():
    assert prioritized_set(world()) == []


def test_prioritized_set_sorted_by_gap():
    far, near = veh(1, 0, 20, 5), veh(2, 0, 10, 5)
    assert [o.id for o in prioritized_set(world(objects=[far, near]))] == [2, 1]


def test_gap_bumper_to_bumper():
    ego = EgoState(0.0, 10.0)
    assert gap(ego, veh(1, 0, 50.0, 0.0, depth=4.0)) == pytest.approx(46.0)


def test_gap_touching_and_overlap_clamp():
    ego = EgoState(0.0, 10.0)
    assert gap(ego, veh(1, 0, 4.0, 0.0, depth=4.0)) == 0.0
    assert gap(ego, veh(1, 0, 3.0, 0.0, depth=4.0)) == 0.0


def test_ego_length_constant():
    assert EGO_LENGTH == 4.0


@pytest.mark.parametrize("kwargs", [dict(a_min=3.0, a_brake=4.0), dict(a_brake=0.0),
                                    dict(tau=0.05), dict(r=0.0), dict(r=1.5),
                                    dict(eps=-0.1)])
def test_vehicle_params_invariants(kwargs):
    with pytest.raises(ValueError):
        VehicleParams(**kwargs)


def test_object_validation():
    with pytest.raises(ValueError):
        veh(1, 0, 10, 5, depth=0.0)
    with pytest.raises(ValueError):
        veh(1, 0, 10, float("nan"))
    with pytest.raises(ValueError):
        EgoState(0.0, -1.0)


def test_world_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        world(objects=[veh(1, 0, 10, 5), ped(1, 0, 20)])


def test_realization_spacing():
    a, b = world(time=0.0), world(time=0.1)
    assert len(Realization((a, b))) == 2
    with pytest.raises(ValueError):
        Realization((a, world(time=0.3)))


scene_objects = st.builds(
    lambda i, lane, pos, v: veh(i, lane, pos, v),
    st.integers(0, 10_000), st.integers(0, 2),
    st.floats(-100, 100, allow_nan=False), st.floats(-20, 20, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(st.lists(scene_objects, max_size=8, unique_by=lambda o: o.id),
       st.floats(-50, 50), st.integers(0, 2))
def test_prioritized_set_partition_and_purity(objs, ego_pos, lane):
    w = WorldState(0.0, EgoState(ego_pos, 5.0, lane=lane), tuple(objs))
    chosen = prioritized_set(w)
    assert chosen == prioritized_set(w)
    ids = {o.id for o in chosen}
    for o in objs:
        assert (o.id in ids) == (o.lane == lane and o.position > ego_pos)
    gaps = [gap(w.ego, o) for o in chosen]
    assert gaps == sorted(gaps)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 200), st.floats(0.1, 30))
def test_gap_nonnegative_and_monotone(pos, delta):
    ego = EgoState(0.0, 5.0)
    g_far = gap(ego, veh(1, 0, pos, 0.0))
    g_near = gap(ego, veh(1, 0, pos - delta, 0.0))
    assert g_far >= 0 and g_near >= 0
    assert g_near <= g_far
