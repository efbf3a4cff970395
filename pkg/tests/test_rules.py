import math

import numpy as np
import pytest

from factories import random_frames
from rules_oracle import oracle_extract
from rsg.errors import ConfigError, UnknownIdError
from rsg.graph import validate_graph
from rsg.labels import AttributeLabel as AL
from rsg.labels import NodeClass as C
from rsg.labels import RelationshipLabel as RL
from rsg.roadmap import build_map, straight_config
from rsg.rules import (
    LIGHT_ID_BASE,
    RuleParams,
    closure_edges,
    detect_attributes,
    detect_pair,
    extract_graph,
    group_closure,
)
from rsg.sim import ObjectState, ScenarioConfig, SceneFrame, simulate


def branch_map():
    return build_map({"lanes": [
        {"id": 0, "points": [[-50, 0], [50, 0]], "width": 3.5},
        {"id": 1, "points": [[10, 0], [30, 8], [50, 20]], "width": 3.5, "predecessor": 0},
    ], "crosswalks": [{"id": 0, "polygon": [[-20, -3], [-17, -3], [-17, 3], [-20, 3]]}]})


MAPS = {
    "four_way": build_map({"preset": "four_way"}),
    "straight": build_map(straight_config(two_way=True, crosswalk=True, signal=True)),
    "branch": branch_map(),
}


@pytest.fixture(scope="module")
def straight():
    return build_map({"preset": "straight"})


def frame(*objs, t=0.0, lights=None):
    return SceneFrame(t, tuple(objs), lights or {})


def test_pedestrians_together_form_base_pair(straight):
    f = frame(ObjectState(1, C.Human, 0, 10, 1, 0), ObjectState(2, C.Human, 1, 10, 1, 0))
    assert RL.InGroup in detect_pair(f, straight, 1, 2)


def test_following_rear_to_front(straight):
    f = frame(ObjectState(1, C.Vehicle, -50, 0, 8, 0, lane_id=0), ObjectState(2, C.Vehicle, -35, 0, 8, 0, lane_id=0))
    assert RL.Following in detect_pair(f, straight, 1, 2)
    assert RL.Following not in detect_pair(f, straight, 2, 1)


def test_far_apart_objects_have_no_relationships(straight):
    f = frame(ObjectState(1, C.Vehicle, -100, 0, 8, 0, lane_id=0), ObjectState(2, C.Vehicle, 100, 0, -8, 0, lane_id=0))
    assert detect_pair(f, straight, 1, 2) == set()


def test_unknown_id(straight):
    f = frame(ObjectState(1, C.Vehicle, 0, 0))
    with pytest.raises(UnknownIdError):
        detect_pair(f, straight, 1, 7)


def test_group_closure_examples():
    comps = group_closure({(1, 2), (2, 3)})
    assert comps == [[1, 2, 3]]
    assert (1, 3, RL.InGroup) in closure_edges(comps)
    assert group_closure(set()) == []
    comps = group_closure({(1, 2), (3, 4)})
    assert comps == [[1, 2], [3, 4]]
    assert not any({i, j} == {1, 3} for i, j, _ in closure_edges(comps))


def test_parked_vehicle_on_roadside(straight):
    w = [ObjectState(1, C.Vehicle, 0, 5, 0, 0)] * 4
    assert detect_attributes(w, straight) == {AL.Parking}


def test_stopped_human_near_crosswalk():
    m = build_map(straight_config(crosswalk=True))
    w = [ObjectState(1, C.Human, 0, 5.1)]
    assert detect_attributes(w, m) == {AL.Stop, AL.NearCrossroad}


def test_obstacle_in_lane(straight):
    assert detect_attributes([ObjectState(1, C.Obstacle, 3, 0)], straight) == {AL.OnLane}


def test_single_parked_vehicle_graph(straight):
    g = extract_graph([frame(ObjectState(1, C.Vehicle, 0, 5))], straight)
    assert list(g.nodes) == [1] and not g.rel_edges
    assert g.attr_edges == {(1, AL.Parking)}


def test_empty_frame(straight):
    g = extract_graph([frame()], straight)
    assert not g.nodes and not g.rel_edges and not g.attr_edges


def test_queued_at_light():
    m = build_map(straight_config(signal=True))
    light = LIGHT_ID_BASE
    front = ObjectState(1, C.Vehicle, -5, 0, lane_id=0)
    rear = ObjectState(2, C.Vehicle, -11.5, 0, lane_id=0)
    g = extract_graph([frame(front, rear, lights={0: "Red"})], m)
    assert {(1, light, RL.WaitingForTs), (2, light, RL.WaitingForTs), (2, 1, RL.Following)} <= g.rel_edges


def test_stop_by_ts_marks_only_the_entering_frame():
    m = build_map(straight_config(signal=True))
    moving = ObjectState(1, C.Vehicle, -8, 0, 2, 0, lane_id=0)
    stopped = ObjectState(1, C.Vehicle, -5, 0, lane_id=0)
    f0, f1, f2 = (frame(o, t=t, lights={0: "Red"}) for t, o in enumerate([moving, stopped, stopped]))
    first = extract_graph([f0, f1], m).rel_edges
    later = extract_graph([f0, f1, f2][-2:], m).rel_edges
    assert (1, LIGHT_ID_BASE, RL.StopByTs) in first
    assert (1, LIGHT_ID_BASE, RL.StopByTs) not in later
    assert (1, LIGHT_ID_BASE, RL.WaitingForTs) in later


def test_react_by_ts():
    m = build_map(straight_config(signal=True))
    o = ObjectState(1, C.Vehicle, -15, 0, 6, 0, -2, 0, lane_id=0)
    assert RL.ReactByTs in detect_pair(frame(o, lights={0: "Yellow"}), m, 1, LIGHT_ID_BASE)
    assert RL.ReactByTs not in detect_pair(frame(o, lights={0: "Green"}), m, 1, LIGHT_ID_BASE)


def test_turn_and_uturn():
    m = MAPS["straight"]
    yaws = np.linspace(0, math.pi / 2, 4)
    w = [ObjectState(1, C.Vehicle, 0, 0, 5 * math.cos(y), 5 * math.sin(y), yaw=y) for y in yaws]
    assert AL.TurnLeft in detect_attributes(w, m)
    w = [ObjectState(1, C.Vehicle, 0, 0, 5, 0, yaw=-y) for y in np.linspace(0, 0.9 * math.pi, 4)]
    got = detect_attributes(w, m)
    assert AL.UTurn in got and AL.TurnRight not in got


def test_lane_branch_and_change():
    m = MAPS["branch"]
    w = [ObjectState(1, C.Vehicle, 5, 0, 5, 0, lane_id=0), ObjectState(1, C.Vehicle, 20, 4, 5, 2, lane_id=1)]
    assert AL.LaneBranchLeft in detect_attributes(w, m)
    m2 = MAPS["straight"]
    w = [ObjectState(1, C.Vehicle, 5, -1, 5, 0, lane_id=0), ObjectState(1, C.Vehicle, 8, 1, 5, 0, lane_id=1)]
    assert AL.LaneChanging in detect_attributes(w, m2)


def test_params_reject_nonpositive_and_unknown():
    with pytest.raises(ConfigError):
        RuleParams(group_dist=0)
    with pytest.raises(ConfigError):
        RuleParams.from_dict({"group_distance": 3})
    assert RuleParams.from_dict(RuleParams().to_dict()) == RuleParams()


@pytest.mark.parametrize("name", sorted(MAPS))
def test_outputs_are_legal_and_pure(name):
    m = MAPS[name]
    rng = np.random.default_rng(11)
    for _ in range(60):
        frames = random_frames(rng, m)
        g = extract_graph(frames, m)
        assert validate_graph(g).ok
        assert extract_graph(frames, m) == g
        for s, d, lab in g.rel_edges:
            assert lab.allows(g.nodes[s].cls, g.nodes[d].cls)


def test_in_group_is_closed():
    rng = np.random.default_rng(5)
    m = MAPS["four_way"]
    for _ in range(100):
        g = extract_graph(random_frames(rng, m, n_max=14, extent=10), m)
        grp = {(s, d) for s, d, lab in g.rel_edges if lab is RL.InGroup}
        assert grp == {(d, s) for s, d in grp}
        for a, b in grp:
            for c, d in grp:
                if b == c and a != d:
                    assert (a, d) in grp


def test_group_dist_monotone():
    rng = np.random.default_rng(9)
    m = MAPS["four_way"]
    small, large = RuleParams(group_dist=2.0), RuleParams(group_dist=6.0)
    for _ in range(200):
        f = random_frames(rng, m, extent=12)[-1]
        ids = [o.id for o in f.objects]
        for a in ids:
            for b in ids:
                if a != b and RL.InGroup in detect_pair(f, m, a, b, small):
                    assert RL.InGroup in detect_pair(f, m, a, b, large)


@pytest.mark.parametrize("name", sorted(MAPS))
def test_matches_oracle(name):
    m = MAPS[name]
    rng = np.random.default_rng(2024)
    for _ in range(150):
        frames = random_frames(rng, m)
        g = extract_graph(frames, m)
        ids, rel, attrs = oracle_extract(frames, m)
        assert set(g.nodes) == ids
        assert g.rel_edges == rel
        assert g.attr_edges == attrs


def test_simulated_scene_matches_oracle():
    m = MAPS["four_way"]
    frames = simulate(m, ScenarioConfig(seed=3, duration=10))
    for k in range(1, len(frames) + 1):
        g = extract_graph(frames[:k], m)
        _, rel, attrs = oracle_extract(frames[:k], m)
        assert (g.rel_edges, g.attr_edges) == (rel, attrs)
