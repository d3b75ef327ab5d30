import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from playplan.core import (
    ActionChunk,
    ChainState,
    CubesState,
    Pose2,
    PushTState,
    SeededRng,
    StateParseError,
    Trajectory,
    Vec2,
    angdist,
    clamp_action,
    clamp_actions,
    deserialize_state,
    hash64,
    read_trajectories,
    serialize_state,
    wrap_angle,
    write_trajectories,
)

angles = st.floats(-20.0, 20.0, allow_nan=False)
coords = st.floats(-0.1, 1.1, allow_nan=False)
vecs = st.tuples(st.floats(-5, 5, allow_nan=False), st.floats(-5, 5, allow_nan=False))


def test_angdist_examples():
    assert angdist(0.0, 0.0) == 0.0
    assert angdist(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(0.2, abs=1e-12)
    assert angdist(0.3, 0.0) == pytest.approx(0.3, abs=1e-15)


@given(angles, angles, angles)
def test_angdist_metric_properties(a, b, c):
    assert 0.0 <= angdist(a, b) <= math.pi
    assert angdist(a, b) == pytest.approx(angdist(b, a), abs=1e-12)
    assert angdist(a, c) <= angdist(a, b) + angdist(b, c) + 1e-9
    assert angdist(a + 2 * math.pi, b) == pytest.approx(angdist(a, b), abs=1e-9)
    assert angdist(a, b - 2 * math.pi) == pytest.approx(angdist(a, b), abs=1e-9)


@given(angles)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


def test_clamp_action_examples():
    assert clamp_action((0.0, 0.0), 0.25) == Vec2(0.0, 0.0)
    v = clamp_action((0.3, 0.4), 0.25)
    assert v.x == pytest.approx(0.15) and v.y == pytest.approx(0.2)
    assert clamp_action((0.1, 0.0), 0.25) == Vec2(0.1, 0.0)
    with pytest.raises(ValueError):
        clamp_action((0.1, 0.0), 0.0)


@given(vecs, st.floats(0.01, 2.0))
def test_clamp_idempotent_and_bounded(v, a_max):
    c = clamp_action(v, a_max)
    assert math.hypot(*c) <= a_max * (1 + 1e-12)
    assert clamp_action(c, a_max) == pytest.approx(c, abs=1e-15)
    assert np.allclose(clamp_actions(np.array([v]), a_max)[0], c, atol=1e-15)


def test_action_chunk_contract():
    with pytest.raises(ValueError):
        ActionChunk(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ActionChunk(np.zeros((2, 2)), dt=0.0)
    ch = ActionChunk([[0.1, 0.0], [0.0, 0.3]])
    assert len(ch) == 2 and not ch.check_bounds(0.25)


def test_trajectory_length_contract():
    s = PushTState(Vec2(0.1, 0.1), Pose2(0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        Trajectory([s, s], np.zeros((2, 2)))
    assert len(Trajectory([s, s, s], np.zeros((2, 2)))) == 2


def _random_state(kind, g):
    pusher = Vec2(*g.uniform(-0.1, 1.1, 2))
    if kind == "pusht":
        return PushTState(pusher, Pose2.make(*g.uniform(0, 1, 2), g.uniform(-math.pi, math.pi)))
    pts = tuple(Vec2(*p) for p in g.uniform(-0.1, 1.1, (3 if kind == "cubes" else 12, 2)))
    return CubesState(pusher, pts) if kind == "cubes" else ChainState(pusher, pts)


@pytest.mark.parametrize("kind", ["pusht", "cubes", "chain"])
def test_serialization_round_trip_1000(kind):
    g = np.random.default_rng(0)
    for _ in range(1000):
        s = _random_state(kind, g)
        rec = json.loads(json.dumps(serialize_state(s)))
        assert deserialize_state(rec) == s


def test_deserialize_errors_and_wrap():
    with pytest.raises(StateParseError) as e:
        deserialize_state({"tee": [0.5, 0.5, 0.0]})
    assert e.value.field == "pusher"
    with pytest.raises(StateParseError) as e:
        deserialize_state({"pusher": [0.1, "x"], "tee": [0.5, 0.5, 0.0]})
    assert e.value.field == "pusher"
    s = deserialize_state({"pusher": [0.1, 0.1], "tee": [0.5, 0.5, 4.0]})
    assert s.tee.theta == pytest.approx(4.0 - 2 * math.pi, abs=1e-15)


def test_trajectory_file_round_trip(tmp_path):
    g = np.random.default_rng(1)
    trajs = [Trajectory([_random_state("chain", g) for _ in range(4)], g.uniform(-0.2, 0.2, (3, 2)))
             for _ in range(3)]
    path = tmp_path / "t.jsonl"
    write_trajectories(path, trajs)
    first = json.loads(path.read_text().splitlines()[0])
    assert {"episode_id", "t", "pusher", "links", "action"} <= set(first)
    assert read_trajectories(path) == trajs


def test_seeded_rng_streams():
    a, b = SeededRng(42), SeededRng(42)
    assert a.bytes(256) == b.bytes(256)
    assert a.child(3).normal(size=5).tolist() == SeededRng(42).child(3).normal(size=5).tolist()
    assert SeededRng(42).child(0).random() != SeededRng(42).child(1).random()
    assert hash64(7, 1) == hash64(7, 1) != hash64(7, 2)
