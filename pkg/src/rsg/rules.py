"""Rule-based relationship and attribute detectors: scene frames -> road scene graphs.

Traffic lights become ``TrafficSign`` nodes with id ``LIGHT_ID_BASE + light.id``.
Only class pairs marked detectable in the relationship table are emitted.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import UnknownIdError
from .geometry import point_in_polygon, polygon_distance, wrap_angle
from .graph import NodeFeature, RoadSceneGraph
from .labels import AttributeLabel as AL
from .labels import NodeClass
from .labels import RelationshipLabel as RL
from .roadmap import RoadMap, TrafficLight, pedestrian_state
from .sim import ObjectState, SceneFrame, dataclass_from_dict

LIGHT_ID_BASE = 10_000
H, V, O = NodeClass.Human, NodeClass.Vehicle, NodeClass.Obstacle


@dataclass(frozen=True)
class RuleParams:
    group_dist: float = 4.0
    group_speed_diff: float = 0.5
    behind_cone_half_angle: float = math.pi / 4
    behind_max_dist: float = 25.0
    follow_max_gap: float = 30.0
    follow_heading_tol: float = math.pi / 6
    approach_ttc_max: float = 8.0
    passby_lateral_max: float = 5.0
    passby_rel_speed_min: float = 1.0
    onlane_margin: float = 0.5
    ts_stop_speed: float = 0.3
    ts_zone_dist: float = 20.0
    react_decel_min: float = 0.5
    attr_window: int = 4
    turn_yaw_thresh: float = math.pi / 8
    park_speed: float = 0.05
    pair_range_max: float = 30.0
    near_dist: float = 3.0

    def __post_init__(self):
        from .errors import ConfigError

        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"rules.{f.name} must be a positive number")
        if int(self.attr_window) != self.attr_window:
            raise ConfigError("rules.attr_window must be an integer")

    @classmethod
    def from_dict(cls, d: dict) -> "RuleParams":
        return dataclass_from_dict(cls, d, "rules")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TrackWindow = dict[int, list[ObjectState]]


def light_node_id(light: TrafficLight) -> int:
    return LIGHT_ID_BASE + light.id


# -- map lookups ------------------------------------------------------------------

@lru_cache(maxsize=64)
def _lane_polys(m: RoadMap, margin: float) -> tuple[tuple[int, np.ndarray], ...]:
    return tuple((ln.id, ln.polygon(margin)) for ln in m.lanes)


def lanes_containing(m: RoadMap, p, margin: float = 0.0) -> list[int]:
    return [lid for lid, poly in _lane_polys(m, margin) if point_in_polygon(p, poly)]


def in_any(p, polys) -> bool:
    return any(point_in_polygon(p, poly) for poly in polys)


def min_distance(p, polys) -> float:
    return min((polygon_distance(p, poly) for poly in polys), default=math.inf)


# -- pairwise predicates -----------------------------------------------------------

def _in_rear_cone(a: ObjectState, b: ObjectState, p: RuleParams) -> bool:
    """True when ``a`` lies behind ``b``: inside b's rear cone, within range."""
    r = a.pos - b.pos
    d = float(np.hypot(*r))
    if d == 0.0 or d > p.behind_max_dist:
        return False
    return float(r @ -b.heading) >= d * math.cos(p.behind_cone_half_angle)


def _lane_stop_gap(m: RoadMap, o: ObjectState, light: TrafficLight) -> float | None:
    """Arc distance from ``o`` to the stop line ahead on its lane (negative once past)."""
    if o.lane_id is None or o.lane_id not in light.lanes:
        return None
    line = m.lane(o.lane_id).line
    s, _, _ = line.project(o.pos)
    return m.stop_arc(light, o.lane_id) - s


def _object_pair(a: ObjectState, b: ObjectState, m: RoadMap, p: RuleParams) -> set[RL]:
    out: set[RL] = set()
    r = b.pos - a.pos
    d = float(np.hypot(*r))
    if d > p.pair_range_max:
        return out
    ca, cb = a.cls, b.cls
    if ca == cb and ca in (H, V):
        if d <= p.group_dist and float(np.hypot(*(a.vel - b.vel))) <= p.group_speed_diff:
            out.add(RL.InGroup)
    if ca is H and cb in (V, O) and _in_rear_cone(a, b, p):
        out.add(RL.Behind)
    if ca is H and cb is V and b.lane_id is not None:
        if b.lane_id in lanes_containing(m, a.pos, p.onlane_margin):
            out.add(RL.OnLane)
    if ca is V and cb is V:
        same = a.lane_id is not None and a.lane_id == b.lane_id
        if same:
            out.add(RL.SameLane)
            if (_in_rear_cone(a, b, p) and d <= p.follow_max_gap
                    and abs(wrap_angle(a.yaw - b.yaw)) <= p.follow_heading_tol):
                out.add(RL.Following)
        vrel = b.vel - a.vel
        rr = float(r @ vrel)
        v2 = float(vrel @ vrel)
        if d > 0 and rr < 0 and v2 > 0 and -rr / v2 <= p.approach_ttc_max:
            out.add(RL.Approaching)
        h = a.heading
        lateral = abs(float(h[0] * r[1] - h[1] * r[0]))
        if lateral <= p.passby_lateral_max and abs(float(vrel @ h)) >= p.passby_rel_speed_min:
            out.add(RL.PassingBy)
    return out


def _light_pair(frame: SceneFrame, m: RoadMap, a: ObjectState, light: TrafficLight,
                p: RuleParams, history: Sequence[ObjectState]) -> set[RL]:
    out: set[RL] = set()
    state = frame.light_states.get(light.id, light.state_at(frame.t))
    if a.cls is H:
        if (a.speed <= p.ts_stop_speed and pedestrian_state(state) == "Red" and light.crosswalks
                and min_distance(a.pos, [m.crosswalk(c).polygon for c in light.crosswalks]) <= p.ts_zone_dist):
            out.add(RL.WaitingTs)
        return out
    if a.cls is not V:
        return out
    gap = _lane_stop_gap(m, a, light)
    if gap is None:
        return out
    waiting = state == "Red" and a.speed <= p.ts_stop_speed and 0.0 <= gap <= p.ts_zone_dist
    if waiting:
        out.add(RL.WaitingForTs)
        if len(history) >= 2 and history[-2].speed > p.ts_stop_speed:
            out.add(RL.StopByTs)
    if (state in ("Red", "Yellow") and 0.0 < gap <= p.ts_zone_dist and a.speed > p.ts_stop_speed
            and float(np.array([a.ax, a.ay]) @ a.heading) <= -p.react_decel_min):
        out.add(RL.ReactByTs)
    return out


def detect_pair(frame: SceneFrame, m: RoadMap, a: int, b: int, p: RuleParams | None = None,
                window: TrackWindow | None = None) -> set[RL]:
    """Every detectable label whose predicate holds for the ordered pair (a, b).

    ``b`` may be a traffic-light node id.  InGroup here is the raw pairwise
    detection, before transitive closure.  ``window`` supplies history for
    the entering-stopped-state event (StopByTs).
    """
    p = p or RuleParams()
    if a == b:
        raise ValueError("detect_pair needs two distinct ids")
    objs = frame.by_id()
    if a not in objs:
        raise UnknownIdError(f"object {a} not in frame")
    oa = objs[a]
    if b in objs:
        labels = _object_pair(oa, objs[b], m, p)
    else:
        light = next((tl for tl in m.traffic_lights if light_node_id(tl) == b), None)
        if light is None:
            raise UnknownIdError(f"object {b} not in frame")
        history = (window or {}).get(a) or [oa]
        labels = _light_pair(frame, m, oa, light, p, history)
        cb = NodeClass.TrafficSign
        return {lab for lab in labels if (oa.cls, cb) in lab.detectable_pairs}
    return {lab for lab in labels if (oa.cls, objs[b].cls) in lab.detectable_pairs}


# -- grouping ----------------------------------------------------------------------

class UnionFind:
    def __init__(self):
        self.parent: dict = {}
        self.size: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        self.size.setdefault(x, 1)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def components(self) -> list[list]:
        groups: dict = {}
        for x in sorted(self.parent):
            groups.setdefault(self.find(x), []).append(x)
        return sorted(groups.values())


def group_closure(base_pairs) -> list[list[int]]:
    """Connected components (size >= 2) of the InGroup base-pair graph."""
    uf = UnionFind()
    for a, b in base_pairs:
        uf.union(a, b)
    return [c for c in uf.components() if len(c) >= 2]


def closure_edges(components) -> set[tuple[int, int, RL]]:
    return {(i, j, RL.InGroup) for comp in components for i in comp for j in comp if i != j}


# -- attributes --------------------------------------------------------------------

def _yaw_change(states: Sequence[ObjectState]) -> float:
    return sum(wrap_angle(b.yaw - a.yaw) for a, b in zip(states, states[1:]))


def detect_attributes(window: Sequence[ObjectState], m: RoadMap, p: RuleParams | None = None) -> set[AL]:
    """Attributes of the object whose recent states are ``window`` (oldest first)."""
    p = p or RuleParams()
    if not window:
        raise ValueError("attribute window is empty")
    last = window[-1]
    pos = last.pos
    out: set[AL] = set()
    lane_polys = [poly for _, poly in _lane_polys(m, 0.0)]
    if last.cls is H:
        out.add(AL.Stop if last.speed <= p.ts_stop_speed else AL.Moving)
        if min_distance(pos, [c.polygon for c in m.crosswalks]) <= p.near_dist:
            out.add(AL.NearCrossroad)
        if 0.0 < min_distance(pos, lane_polys) <= p.near_dist:
            out.add(AL.NearLane)
    elif last.cls is O:
        out.add(AL.OnLane if in_any(pos, lane_polys) else AL.OnRoadside)
    elif last.cls is V:
        moving = last.speed > p.ts_stop_speed
        in_inter = in_any(pos, m.intersections)
        if max(s.speed for s in window) <= p.park_speed and not in_inter and not in_any(pos, lane_polys):
            out.add(AL.Parking)
        dyaw = _yaw_change(window)
        if abs(dyaw) >= 3 * math.pi / 4:
            out.add(AL.UTurn)
        elif dyaw > p.turn_yaw_thresh:
            out.add(AL.TurnLeft)
        elif dyaw < -p.turn_yaw_thresh:
            out.add(AL.TurnRight)
        elif moving:
            out.add(AL.GoStraight)
        a_long = float(np.array([last.ax, last.ay]) @ last.heading)
        if a_long >= p.react_decel_min:
            out.add(AL.Acceleration)
        elif a_long <= -p.react_decel_min:
            out.add(AL.SlowDown)
        if in_inter and moving:
            out.add(AL.IntersectionPassing)
        if moving and in_any(pos, [c.polygon for c in m.crosswalks]):
            out.add(AL.PassingCr)
        lanes = [s.lane_id for s in window if s.lane_id is not None]
        if lanes and lanes[0] != lanes[-1]:
            old, new = lanes[0], lanes[-1]
            if m.lane(new).predecessor == old:
                _, lat, _ = m.lane(old).line.project(pos)
                out.add(AL.LaneBranchLeft if lat > 0 else AL.LaneBranchRight)
            else:
                out.add(AL.LaneChanging)
    return out


# -- extraction --------------------------------------------------------------------

def track_windows(frames: Sequence[SceneFrame], size: int) -> TrackWindow:
    """Last ``size`` states of every object present in the final frame."""
    recent = frames[-size:]
    last_ids = [o.id for o in frames[-1].objects]
    win: TrackWindow = {i: [] for i in last_ids}
    for f in recent:
        for o in f.objects:
            if o.id in win:
                win[o.id].append(o)
    return win


def object_feature(o: ObjectState) -> NodeFeature:
    return NodeFeature(o.cls, o.x, o.y, o.vx, o.vy, o.ax, o.ay, wrap_angle(o.yaw),
                       wrap_angle(o.pitch), wrap_angle(o.roll))


def extract_graph(frames: Sequence[SceneFrame], m: RoadMap, p: RuleParams | None = None) -> RoadSceneGraph:
    """Ground-truth road scene graph of the last frame; earlier frames give attribute history."""
    p = p or RuleParams()
    if not frames:
        raise ValueError("extract_graph needs at least one frame")
    frame = frames[-1]
    win = track_windows(frames, int(p.attr_window))
    nodes = {o.id: object_feature(o) for o in frame.objects}
    for tl in m.traffic_lights:
        nodes[light_node_id(tl)] = NodeFeature(NodeClass.TrafficSign, float(tl.position[0]),
                                               float(tl.position[1]))
    rel: set = set()
    base = set()
    ids = [o.id for o in frame.objects]
    for a in ids:
        for b in ids:
            if a == b:
                continue
            labels = detect_pair(frame, m, a, b, p, win)
            if RL.InGroup in labels:
                base.add((min(a, b), max(a, b)))
                labels.discard(RL.InGroup)
            rel.update((a, b, lab) for lab in labels)
        for tl in m.traffic_lights:
            rel.update((a, light_node_id(tl), lab) for lab in detect_pair(frame, m, a, light_node_id(tl), p, win))
    rel |= closure_edges(group_closure(base))
    attrs = {(oid, a) for oid in ids for a in detect_attributes(win[oid], m, p)}
    return RoadSceneGraph(nodes, frozenset(rel), frozenset(attrs), float(frame.t))


def extract_scene(frames: Sequence[SceneFrame], m: RoadMap, p: RuleParams | None = None) -> list[RoadSceneGraph]:
    """One graph per frame; attribute windows warm up over the first frames."""
    p = p or RuleParams()
    return [extract_graph(frames[: k + 1], m, p) for k in range(len(frames))]
