import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rulebook_rl.domain import EgoState, Kind, SceneObject, VehicleParams, WorldState


def veh(oid, lane, position, speed, max_brake=6.0, depth=4.0):
    return SceneObject(id=oid, kind=Kind.VEHICLE, lane=lane, position=position, speed=speed,
                       depth=depth, max_brake=max_brake)


def ped(oid, lane, position, speed=0.0, depth=0.5):
    return SceneObject(id=oid, kind=Kind.PEDESTRIAN, lane=lane, position=position,
                       speed=speed, width=0.5, height=1.8, depth=depth, max_brake=3.0)


def world(ego_speed=10.0, accel=0.0, objects=(), ego_pos=0.0, lane=0, time=0.0):
    return WorldState(time, EgoState(ego_pos, ego_speed, accel, lane), tuple(objects))


@pytest.fixture
def params():
    return VehicleParams()


def random_frame(rng, n_slots=8, fog=None, p_empty=0.3):
    """Sensor frame with random readings; roughly ``p_empty`` of the slots empty."""
    from rulebook_rl.simulator import SensorFrame, SensorReading
    slots = []
    for i in range(n_slots):
        if rng.random() < p_empty:
            slots.append(None)
            continue
        slots.append(SensorReading(
            noisy_gap=float(rng.uniform(-2.0, 130.0)),
            noisy_speed=float(rng.uniform(-12.0, 32.0)),
            noisy_lane_offset=float(rng.normal(0.0, 1.0)),
            class_evidence=float(rng.uniform(0.0, 1.0)),
            source_id=i + 1))
    fog = float(rng.uniform(0.0, 60.0)) if fog is None else fog
    return SensorFrame(tuple(slots), fog)


def random_tokens(rng, frame, vocab=None):
    """A well-formed token sequence per slot; present slots emit all four heads."""
    from rulebook_rl.perception import ABSENT, PRESENT, VOCAB
    vocab = vocab or VOCAB
    out = []
    for _ in frame.slots:
        if rng.random() < 0.4:
            out.append((ABSENT,))
        else:
            out.append((PRESENT, int(rng.integers(2)), int(rng.integers(vocab.n_dist)),
                        int(rng.integers(vocab.n_speed))))
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
