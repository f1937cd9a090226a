from dataclasses import replace

import numpy as np
import pytest

from conftest import ped, veh, world
from rulebook_rl.controller import ControlCommand, ctrl
from rulebook_rl.domain import Kind, VehicleParams, gap, prioritized_set
from rulebook_rl.perception import blind_detector, ground_truth_detector
from rulebook_rl.rulebook import score_state
from rulebook_rl.simulator import (
    Behavior,
    BehaviorKind,
    NoiseModel,
    SENSOR_RANGE,
    ScenarioConfig,
    Scenario,
    run_episode,
    sense,
    spawn,
    step,
)

QUIET = NoiseModel(sigma_gap0=0, sigma_speed0=0, sigma_lane0=0, sigma_class0=0, miss0=0)


def test_step_kinematics(params):
    w = world(10.0)
    nxt = step(w, ControlCommand(2.0), params)
    assert nxt.ego.speed == pytest.approx(10.2)
    assert nxt.ego.position == pytest.approx(1.01)
    assert nxt.ego.accel == 2.0
    assert nxt.time == pytest.approx(0.1)


def test_step_never_reverses(params):
    nxt = step(world(0.0), ControlCommand(-params.a_min), params)
    assert nxt.ego.speed == 0.0 and nxt.ego.position == 0.0
    # stop within the step: displacement is the stopping distance
    nxt = step(world(0.4), ControlCommand(-8.0), params)
    assert nxt.ego.speed == 0.0
    assert nxt.ego.position == pytest.approx(0.4 ** 2 / 16)


def test_stationary_behavior(params):
    p = ped(1, 0, 30.0, 1.5)
    nxt = step(world(5.0, objects=[p]), ControlCommand(0.0), params,
               {1: Behavior(BehaviorKind.STATIONARY)})
    assert nxt.objects[0] == p


def test_behavior_acceleration_applied(params):
    v = veh(1, 0, 30.0, 10.0)
    nxt = step(world(5.0, objects=[v]), ControlCommand(0.0), params,
               {1: Behavior(BehaviorKind.RANDOM_BRAKE, (-5.0,))})
    assert nxt.objects[0].speed == pytest.approx(9.5)
    assert nxt.objects[0].position == pytest.approx(30.0 + 1.0 - 0.025)


def test_oncoming_objects_move_toward_ego(params):
    v = veh(1, 2, 60.0, -8.0)
    nxt = step(world(5.0, objects=[v]), ControlCommand(0.0), params)
    assert nxt.objects[0].position == pytest.approx(59.2)


def test_despawn_far_behind(params):
    v = veh(1, 1, -59.9, 0.0)
    nxt = step(world(10.0, objects=[v]), ControlCommand(0.0), params)
    assert nxt.objects == ()


def test_spawn_deterministic_and_seed_sensitive():
    a, b = spawn(ScenarioConfig(seed=4)), spawn(ScenarioConfig(seed=4))
    assert a.initial == b.initial and a.behaviors == b.behaviors
    assert spawn(ScenarioConfig(seed=5)).initial != a.initial


def test_spawn_empty_road():
    sc = spawn(ScenarioConfig(seed=1, n_objects=0))
    assert sc.initial.objects == ()
    assert sc.initial.ego.lane == 0
    assert 0 <= sc.initial.ego.speed <= VehicleParams().v_lim


def test_spawn_compliant_start(params):
    for seed in range(30):
        sc = spawn(ScenarioConfig(seed=seed), params)
        assert score_state(sc.initial, params).tolist() == [0.0, 0.0, 0.0, 0.0]
        for o in prioritized_set(sc.initial):
            assert o.speed >= 0


def test_spawn_infeasible_raises():
    # every lead is a vehicle that cannot out-brake the ego's comfortable rate
    cfg = ScenarioConfig(seed=0, kind_mix=(1.0, 0.0), lead_probability=1.0, max_retries=5)
    with pytest.raises(RuntimeError, match="compliant scenario"):
        spawn(cfg, VehicleParams(a_brake=7.0, a_min=8.0))


def test_behaviors_respect_max_brake():
    for seed in range(30):
        sc = spawn(ScenarioConfig(seed=seed, compliant=False))
        for oid, beh in sc.behaviors.items():
            obj = next(o for o in sc.initial.objects if o.id == oid)
            assert all(a >= -obj.max_brake - 1e-12 for a in beh.accels)


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(kind_mix=(0.5, 0.6))
    with pytest.raises(ValueError):
        ScenarioConfig(horizon=0)
    with pytest.raises(ValueError):
        ScenarioConfig(fog_density=120)


def test_sense_noiseless_is_identity():
    w = world(10.0, objects=[veh(1, 0, 30.0, 8.0), ped(2, 1, 12.0, 1.0), veh(3, 0, -20.0, 5.0)])
    frame = sense(w, QUIET, np.random.default_rng(0))
    readings = {r.source_id: r for r in frame.slots if r is not None}
    assert set(readings) == {1, 2}
    assert readings[1].noisy_gap == gap(w.ego, w.objects[0])
    assert readings[1].noisy_speed == 8.0
    assert readings[1].class_evidence == 1.0
    assert readings[2].class_evidence == 0.0
    assert readings[2].noisy_lane_offset == 1.0


def test_sense_fog_saturates_miss_probability():
    assert NoiseModel().miss_probability(100) == 0.9
    assert NoiseModel().miss_probability(40) == pytest.approx(0.45)
    assert NoiseModel().sigma_factor(40) == pytest.approx(3.0)


def test_sense_miss_rate_matches_model():
    w = world(10.0, objects=[veh(1, 0, 30.0, 8.0)])
    rng = np.random.default_rng(1)
    n = 4000
    seen = sum(any(r is not None for r in sense(w, NoiseModel(), rng, fog=40).slots)
               for _ in range(n))
    assert abs(seen / n - 0.55) < 0.03


def test_sense_empty_world_and_slot_count():
    frame = sense(world(10.0), NoiseModel(), np.random.default_rng(0), n_slots=5)
    assert len(frame) == 5 and all(s is None for s in frame.slots)


def test_sense_range_limit():
    far = veh(1, 0, 2.0 + SENSOR_RANGE + 5.0, 0.0)
    frame = sense(world(10.0, objects=[far]), QUIET, np.random.default_rng(0))
    assert all(s is None for s in frame.slots)


def test_sense_shuffles_slots():
    w = world(10.0, objects=[veh(1, 0, 30.0, 8.0)])
    rng = np.random.default_rng(2)
    positions = {next(i for i, s in enumerate(sense(w, QUIET, rng).slots) if s is not None)
                 for _ in range(200)}
    assert len(positions) == 8


def test_run_episode_ground_truth_zero(params):
    for seed in range(10):
        rec = run_episode(spawn(ScenarioConfig(seed=seed), params), ground_truth_detector,
                          ctrl, params)
        assert len(rec) == 100
        assert np.all(np.abs(rec.totals) <= 1e-9)


def test_run_episode_blind_empty_road_is_clean(params):
    sc = spawn(ScenarioConfig(seed=3, n_objects=0), params)
    rec = run_episode(sc, blind_detector, ctrl, params)
    assert rec.totals.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_run_episode_blind_with_lead_violates(params):
    lead = veh(1, 0, 2.0 + 20.0 + 2.0, 6.0)
    sc = Scenario(world(8.0, objects=[lead]), {}, ScenarioConfig(horizon=100))
    rec = run_episode(sc, blind_detector, ctrl, params)
    assert rec.totals[1] > 0


def test_run_episode_horizon_one(params):
    sc = spawn(ScenarioConfig(seed=2, horizon=1), params)
    rec = run_episode(sc, ground_truth_detector, ctrl, params)
    assert len(rec) == 1 and len(rec.frames) == 1 and rec.violations.shape == (1, 4)


def test_run_episode_ordering(params):
    """Recorded state t carries the command computed from it; state t+1 is its step."""
    sc = spawn(ScenarioConfig(seed=6, horizon=20), params)
    rec = run_episode(sc, ground_truth_detector, ctrl, params)
    for t in range(19):
        x = rec.states[t]
        assert x.ego.accel == rec.controls[t]
        assert x.ego.accel == ctrl(x.objects, None, replace(x.ego, accel=0.0), params).accel
        nxt = step(x, rec.controls[t], params, sc.behaviors)
        assert nxt.ego == replace(rec.states[t + 1].ego, accel=nxt.ego.accel)
        assert np.array_equal(rec.violations[t], score_state(x, params))


def test_ego_speed_nonnegative_and_kinematics_consistent(params):
    sc = spawn(ScenarioConfig(seed=9, compliant=False), params)
    rec = run_episode(sc, blind_detector, ctrl, params)
    for a, b in zip(rec.states, rec.states[1:]):
        assert b.ego.speed >= 0
        if b.ego.speed > 0:
            expect = a.ego.speed * params.dt + 0.5 * a.ego.accel * params.dt ** 2
            assert abs((b.ego.position - a.ego.position) - expect) <= 1e-9


def test_run_episode_reproducible(params):
    from rulebook_rl.perception import PolicyParams, SamplingDetector
    det = SamplingDetector(PolicyParams.random(0, 0.5))
    sc = spawn(ScenarioConfig(seed=8), params)
    a = run_episode(sc, det, ctrl, params)
    b = run_episode(sc, det, ctrl, params)
    assert a.states == b.states and a.frames == b.frames
    assert [d.tokens for d in a.detections] == [d.tokens for d in b.detections]
