"""Road maps: lanes, crosswalks, signalised stop lines, static obstacles.

Two presets are provided: a straight road (optionally two-way, with a
crosswalk and a signal) and a four-way intersection with one through lane and
one left-turn lane per approach (8 lanes, 4 lights, 4 crosswalks).  Traffic is
right-hand.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidGeometryError, ParseError, SchemaVersionError
from .geometry import Polyline, arc_points, polyline_crossing, rect, segment_intersection

MAP_VERSION = 1
LIGHT_STATES = ("Red", "Yellow", "Green")


@dataclass(frozen=True, eq=False)
class Lane:
    id: int
    points: np.ndarray
    width: float
    predecessor: int | None = None

    @cached_property
    def line(self) -> Polyline:
        return Polyline(self.points)

    def polygon(self, margin: float = 0.0) -> np.ndarray:
        return self.line.offset_polygon(self.width / 2 + margin)


@dataclass(frozen=True, eq=False)
class Crosswalk:
    id: int
    polygon: np.ndarray


@dataclass(frozen=True, eq=False)
class TrafficLight:
    id: int
    position: tuple[float, float]
    stop_line: np.ndarray  # 2 x 2 segment
    lanes: tuple[int, ...]
    phases: tuple[tuple[str, float], ...]
    offset: float = 0.0
    crosswalks: tuple[int, ...] = ()

    @property
    def cycle(self) -> float:
        return sum(d for _, d in self.phases)

    def state_at(self, t: float) -> str:
        """Vehicle signal state; the schedule repeats every ``cycle`` seconds."""
        if len(self.phases) == 1 or math.isinf(self.cycle):
            tau = t - self.offset
            for state, dur in self.phases:
                if tau < dur:
                    return state
                tau -= dur
            return self.phases[-1][0]
        tau = (t - self.offset) % self.cycle
        for state, dur in self.phases:
            if tau < dur:
                return state
            tau -= dur
        return self.phases[-1][0]


def pedestrian_state(vehicle_state: str) -> str:
    """Pedestrians may cross only while the vehicle signal is red."""
    return "Green" if vehicle_state == "Red" else "Red"


@dataclass(frozen=True, eq=False)
class StaticObstacle:
    id: int
    position: tuple[float, float]
    footprint: np.ndarray
    yaw: float = 0.0


@dataclass(frozen=True, eq=False)
class RoadMap:
    lanes: tuple[Lane, ...]
    crosswalks: tuple[Crosswalk, ...] = ()
    traffic_lights: tuple[TrafficLight, ...] = ()
    static_obstacles: tuple[StaticObstacle, ...] = ()
    intersections: tuple[np.ndarray, ...] = ()
    _stop_cache: dict = field(default_factory=dict, repr=False)

    def lane(self, lane_id: int) -> Lane:
        return self._lane_index[lane_id]

    @cached_property
    def _lane_index(self) -> dict[int, Lane]:
        return {ln.id: ln for ln in self.lanes}

    def crosswalk(self, cw_id: int) -> Crosswalk:
        return next(c for c in self.crosswalks if c.id == cw_id)

    def light(self, light_id: int) -> TrafficLight:
        return next(tl for tl in self.traffic_lights if tl.id == light_id)

    def stop_arc(self, light: TrafficLight, lane_id: int) -> float:
        """Arc length along ``lane_id`` where the light's stop line crosses it."""
        key = (light.id, lane_id)
        if key not in self._stop_cache:
            s = polyline_crossing(self.lane(lane_id).line, light.stop_line[0], light.stop_line[1])
            if s is None:
                raise InvalidGeometryError(f"stop line of light {light.id} misses lane {lane_id}")
            self._stop_cache[key] = s
        return self._stop_cache[key]

    def lights_for_lane(self, lane_id: int) -> list[TrafficLight]:
        return [tl for tl in self.traffic_lights if lane_id in tl.lanes]

    @cached_property
    def lane_polygons(self) -> dict[int, np.ndarray]:
        return {ln.id: ln.polygon() for ln in self.lanes}


# -- construction --------------------------------------------------------------

DEFAULT_PHASES = (("Green", 20.0), ("Yellow", 3.0), ("Red", 23.0))


def _rot(points, quarter_turns: int) -> np.ndarray:
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
    p = np.asarray(points, dtype=np.float64)
    return np.stack([c * p[..., 0] - s * p[..., 1], s * p[..., 0] + c * p[..., 1]], axis=-1)


def four_way_config(arm_length: float = 100.0, lane_width: float = 3.5,
                    obstacles=((-40.0, -8.75), (35.0, 8.75), (-8.75, 60.0), (80.0, 1.75))) -> dict:
    """Explicit map document for the four-way preset."""
    w, A = lane_width, arm_length
    H = 2 * w  # half-width of the intersection box
    lanes, crosswalks, lights = [], [], []
    for d in range(4):
        through = _rot([[-A, -1.5 * w], [A, -1.5 * w]], d)
        r = H + 0.5 * w
        arc = arc_points((-H, H), r, -math.pi / 2, 0.0, n=8)
        left = np.concatenate([[[-A, -0.5 * w]], arc, [[0.5 * w, A]]])
        lanes.append({"id": 2 * d, "points": through.tolist(), "width": w})
        lanes.append({"id": 2 * d + 1, "points": _rot(left, d).tolist(), "width": w})
        crosswalks.append({"id": d, "polygon": _rot(rect(-(H + 2.5), 0.0, 3.0, 2 * H), d).tolist()})
        stop = _rot([[-(H + 5.0), -2 * w - 0.01], [-(H + 5.0), 0.01]], d)
        lights.append({
            "id": d,
            "position": _rot([-(H + 5.0), -2 * w - 1.0], d).tolist(),
            "stop_line": stop.tolist(),
            "lanes": [2 * d, 2 * d + 1],
            "crosswalks": [d],
            "phases": [list(p) for p in DEFAULT_PHASES],
            "offset": 0.0 if d % 2 == 0 else 23.0,
        })
    return {
        "preset": "custom",
        "lanes": lanes,
        "crosswalks": crosswalks,
        "traffic_lights": lights,
        "static_obstacles": [
            {"id": i, "position": list(p), "footprint": rect(p[0], p[1], 1.0, 1.0).tolist()}
            for i, p in enumerate(obstacles)
        ],
        "intersections": [rect(0.0, 0.0, 2 * H, 2 * H).tolist()],
    }


def straight_config(length: float = 200.0, lane_width: float = 3.5, two_way: bool = False,
                    crosswalk: bool = False, signal: bool = False, obstacles=()) -> dict:
    w, L = lane_width, length / 2
    if two_way:
        lanes = [{"id": 0, "points": [[-L, -w / 2], [L, -w / 2]], "width": w},
                 {"id": 1, "points": [[L, w / 2], [-L, w / 2]], "width": w}]
        half = w
    else:
        lanes = [{"id": 0, "points": [[-L, 0.0], [L, 0.0]], "width": w}]
        half = w / 2
    cfg = {"preset": "custom", "lanes": lanes, "crosswalks": [], "traffic_lights": [],
           "static_obstacles": [
               {"id": i, "position": list(p), "footprint": rect(p[0], p[1], 1.0, 1.0).tolist()}
               for i, p in enumerate(obstacles)],
           "intersections": []}
    if crosswalk:
        cfg["crosswalks"].append({"id": 0, "polygon": rect(0.0, 0.0, 3.0, 2 * half + 1.0).tolist()})
    if signal:
        x = -3.0
        cfg["traffic_lights"].append({
            "id": 0, "position": [x, -half - 1.0],
            "stop_line": [[x, -half - 0.01], [x, half + 0.01]] if not two_way else [[x, -half - 0.01], [x, 0.0]],
            "lanes": [0], "crosswalks": [0] if crosswalk else [],
            "phases": [list(p) for p in DEFAULT_PHASES], "offset": 0.0,
        })
    return cfg


def _expand(cfg: dict) -> dict:
    preset = cfg.get("preset", "custom")
    opts = {k: v for k, v in cfg.items() if k != "preset"}
    if preset == "four_way":
        allowed = {"arm_length", "lane_width", "obstacles"}
        _reject_unknown(opts, allowed, "four_way map")
        if "obstacles" in opts:
            opts["obstacles"] = [tuple(p) for p in opts["obstacles"]]
        return four_way_config(**opts)
    if preset == "straight":
        allowed = {"length", "lane_width", "two_way", "crosswalk", "signal", "obstacles"}
        _reject_unknown(opts, allowed, "straight map")
        return straight_config(**opts)
    if preset == "custom":
        _reject_unknown(opts, {"lanes", "crosswalks", "traffic_lights", "static_obstacles",
                               "intersections", "version"}, "map")
        return cfg
    raise InvalidGeometryError(f"unknown map preset {preset!r}")


def _reject_unknown(d: dict, allowed: set, what: str) -> None:
    from .errors import ConfigError

    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {what} config: {', '.join(extra)}")


def _check_lane(lane: Lane) -> None:
    pts = lane.points
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2 or not np.isfinite(pts).all():
        raise InvalidGeometryError(f"lane {lane.id} needs at least two finite points")
    if not lane.width > 0:
        raise InvalidGeometryError(f"lane {lane.id} width must be positive")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    if (seg <= 1e-9).any():
        raise InvalidGeometryError(f"lane {lane.id} has a zero-length segment")
    n = len(pts) - 1
    for i in range(n):
        for j in range(i + 2, n):
            if segment_intersection(pts[i], pts[i + 1], pts[j], pts[j + 1]) is not None:
                raise InvalidGeometryError(f"lane {lane.id} self-intersects")


def build_map(map_config: dict) -> RoadMap:
    """Deterministically build a :class:`RoadMap` from a preset or explicit config."""
    cfg = _expand(dict(map_config))
    lanes_cfg = cfg.get("lanes") or []
    if not lanes_cfg:
        raise InvalidGeometryError("map declares no lanes")
    lanes = tuple(
        Lane(int(ln["id"]), np.asarray(ln["points"], dtype=np.float64), float(ln["width"]),
             ln.get("predecessor"))
        for ln in lanes_cfg
    )
    for ln in lanes:
        _check_lane(ln)
    if len({ln.id for ln in lanes}) != len(lanes):
        raise InvalidGeometryError("duplicate lane ids")
    crosswalks = tuple(Crosswalk(int(c["id"]), np.asarray(c["polygon"], dtype=np.float64))
                       for c in cfg.get("crosswalks", []))
    lights = []
    for tl in cfg.get("traffic_lights", []):
        phases = tuple((str(s), float(d)) for s, d in tl["phases"])
        if not phases or any(s not in LIGHT_STATES or not d > 0 for s, d in phases):
            raise InvalidGeometryError(f"light {tl['id']} has an invalid phase schedule")
        lights.append(TrafficLight(
            int(tl["id"]), tuple(float(v) for v in tl["position"]),
            np.asarray(tl["stop_line"], dtype=np.float64), tuple(int(v) for v in tl["lanes"]),
            phases, float(tl.get("offset", 0.0)), tuple(int(v) for v in tl.get("crosswalks", ())),
        ))
    obstacles = tuple(
        StaticObstacle(int(o["id"]), tuple(float(v) for v in o["position"]),
                       np.asarray(o["footprint"], dtype=np.float64), float(o.get("yaw", 0.0)))
        for o in cfg.get("static_obstacles", [])
    )
    inters = tuple(np.asarray(p, dtype=np.float64) for p in cfg.get("intersections", []))
    m = RoadMap(lanes, crosswalks, tuple(lights), obstacles, inters)
    known = {ln.id for ln in lanes}
    for tl in m.traffic_lights:
        for lid in tl.lanes:
            if lid not in known:
                raise InvalidGeometryError(f"light {tl.id} controls unknown lane {lid}")
            m.stop_arc(tl, lid)
    return m


def map_to_doc(m: RoadMap) -> dict:
    return {
        "version": MAP_VERSION,
        "lanes": [{"id": ln.id, "points": ln.points.tolist(), "width": ln.width,
                   **({"predecessor": ln.predecessor} if ln.predecessor is not None else {})}
                  for ln in m.lanes],
        "crosswalks": [{"id": c.id, "polygon": c.polygon.tolist()} for c in m.crosswalks],
        "traffic_lights": [{"id": tl.id, "position": list(tl.position), "stop_line": tl.stop_line.tolist(),
                            "lanes": list(tl.lanes), "crosswalks": list(tl.crosswalks),
                            "phases": [[s, d] for s, d in tl.phases], "offset": tl.offset}
                           for tl in m.traffic_lights],
        "static_obstacles": [{"id": o.id, "position": list(o.position), "footprint": o.footprint.tolist(),
                              "yaw": o.yaw} for o in m.static_obstacles],
        "intersections": [p.tolist() for p in m.intersections],
    }


def map_to_json(m: RoadMap) -> str:
    return json.dumps(map_to_doc(m), sort_keys=True, separators=(",", ":"))


def map_from_json(text: str) -> RoadMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if doc.get("version") != MAP_VERSION:
        raise SchemaVersionError(f"map version {doc.get('version')!r}, expected {MAP_VERSION}")
    body = {k: v for k, v in doc.items() if k != "version"}
    body["preset"] = "custom"
    return build_map(body)
