"""Synthetic multi-agent road scenes.

Vehicles follow lane centrelines under the Intelligent Driver Model, stopping
for leaders, static obstacles in their lane and red (or stoppable yellow)
signals.  Pedestrians walk waypoint paths at constant speed; groups share a
path and keep fixed offsets.  All state advances with semi-implicit Euler:
speed first, then position from the new speed.  Cartesian velocity is the
per-step displacement over ``dt`` so position always integrates velocity
exactly, also on curved lanes.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, SchemaVersionError
from .geometry import Polyline, point_in_polygon, wrap_angle
from .labels import NodeClass
from .roadmap import RoadMap, TrafficLight, pedestrian_state

SCENE_VERSION = 1


@dataclass(frozen=True)
class ObjectState:
    id: int
    cls: NodeClass
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    lane_id: int | None = None

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def vel(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])


@dataclass(frozen=True)
class SceneFrame:
    t: float
    objects: tuple[ObjectState, ...]
    light_states: dict[int, str] = field(default_factory=dict)

    def by_id(self) -> dict[int, ObjectState]:
        return {o.id: o for o in self.objects}


# -- configuration ----------------------------------------------------------------

@dataclass
class ArchetypeCounts:
    lane_follower: int = 6
    pedestrian_group: int = 2
    parked_vehicle: int = 2
    queued_at_light: int = 3
    passer_by: int = 2


@dataclass
class Behavior:
    desired_speed: float = 10.0
    time_headway: float = 1.5
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    jam_distance: float = 2.0
    accel_exponent: float = 4.0
    vehicle_length: float = 4.5
    ped_speed: float = 1.2
    group_spread: float = 2.0
    group_size: int = 3
    initial_speed: float | None = None  # lane followers; None draws from [0.5, 1] x desired


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration: float = 20.0
    dt: float = 0.5
    counts: ArchetypeCounts = field(default_factory=ArchetypeCounts)
    behavior: Behavior = field(default_factory=Behavior)
    map: dict = field(default_factory=lambda: {"preset": "four_way"})

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.duration >= self.dt:
            raise ConfigError("duration must be at least dt")

    @property
    def n_frames(self) -> int:
        return math.ceil(round(self.duration / self.dt, 9))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return dataclass_from_dict(cls, d, "sim")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def dataclass_from_dict(cls, d: dict, where: str):
    """Build nested dataclasses, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    extra = sorted(set(d) - set(fields))
    if extra:
        raise ConfigError(f"{where}: unknown keys {', '.join(extra)}")
    kwargs = {}
    for name, value in d.items():
        ftype = fields[name].type
        sub = _DATACLASS_FIELDS.get((cls.__name__, name))
        if sub is not None:
            kwargs[name] = dataclass_from_dict(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
            if ftype in ("float", float) and isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a number")
    return cls(**kwargs)


_DATACLASS_FIELDS = {
    ("ScenarioConfig", "counts"): ArchetypeCounts,
    ("ScenarioConfig", "behavior"): Behavior,
}


# -- agents ---------------------------------------------------------------------

@dataclass
class _Vehicle:
    id: int
    lane: int
    s: float
    v: float
    v0: float


@dataclass
class _Walker:
    id: int
    path: Polyline
    s: float
    speed: float
    offset: np.ndarray
    wait_s: float | None = None
    light: TrafficLight | None = None


@dataclass
class _Static:
    id: int
    cls: NodeClass
    x: float
    y: float
    yaw: float


def idm_accel(v: float, v0: float, gap: float, dv: float, b: Behavior) -> float:
    """IDM acceleration for speed ``v``, free speed ``v0``, net gap and approach rate ``dv``."""
    a, bb = b.max_accel, b.comfort_decel
    free = 1.0 - (v / v0) ** b.accel_exponent
    if math.isinf(gap):
        return a * free
    s_star = b.jam_distance + max(0.0, v * b.time_headway + v * dv / (2.0 * math.sqrt(a * bb)))
    return a * (free - (s_star / max(gap, 1e-3)) ** 2)


class _Scene:
    def __init__(self, m: RoadMap, cfg: ScenarioConfig):
        self.m, self.cfg = m, cfg
        self.b = cfg.behavior
        self.rng = np.random.default_rng(cfg.seed)
        self.vehicles: list[_Vehicle] = []
        self.walkers: list[list[_Walker]] = []
        self.statics: list[_Static] = []
        self.next_id = 1
        self.obstacle_arcs = self._obstacle_arcs()
        self._spawn()

    def _new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def _obstacle_arcs(self) -> dict[int, list[float]]:
        arcs: dict[int, list[float]] = {}
        for ln in self.m.lanes:
            for ob in self.m.static_obstacles:
                s, lat, _ = ln.line.project(ob.position)
                if abs(lat) <= ln.width / 2 and 0.0 < s < ln.line.length:
                    arcs.setdefault(ln.id, []).append(s)
        return arcs

    # spawning
    def _free_slot(self, lane_id: int, lo: float, hi: float, spacing: float) -> float | None:
        taken = [v.s for v in self.vehicles if v.lane == lane_id]
        taken += self.obstacle_arcs.get(lane_id, [])
        for _ in range(50):
            s = float(self.rng.uniform(lo, hi))
            if all(abs(s - t) >= spacing for t in taken):
                return s
        return None

    def _spawn(self):
        c, b, m, rng = self.cfg.counts, self.b, self.m, self.rng
        lights = list(m.traffic_lights)
        if lights:
            red = [tl for tl in lights if tl.state_at(0.0) == "Red"] or lights
            per_lane: dict[int, int] = {}
            for _ in range(c.queued_at_light):
                tl = red[int(rng.integers(len(red)))]
                lid = tl.lanes[int(rng.integers(len(tl.lanes)))]
                k = per_lane.get(lid, 0)
                per_lane[lid] = k + 1
                s = m.stop_arc(tl, lid) - 15.0 - 10.0 * k - float(rng.uniform(0.0, 3.0))
                if s < 0:
                    continue
                self.vehicles.append(_Vehicle(self._new_id(), lid, s, float(rng.uniform(3.0, 6.0)),
                                              b.desired_speed))
        lane_ids = [ln.id for ln in m.lanes]
        for _ in range(c.lane_follower):
            lid = lane_ids[int(rng.integers(len(lane_ids)))]
            L = m.lane(lid).line.length
            s = self._free_slot(lid, 5.0, 0.35 * L, 12.0)
            if s is None:
                continue
            v0 = b.desired_speed
            v_init = float(rng.uniform(0.5, 1.0)) * v0
            if b.initial_speed is not None:
                v_init = float(b.initial_speed)
            self.vehicles.append(_Vehicle(self._new_id(), lid, s, v_init, v0))
        for _ in range(c.parked_vehicle):
            spot = self._parking_spot()
            if spot is not None:
                p, yaw = spot
                self.statics.append(_Static(self._new_id(), NodeClass.Vehicle, float(p[0]), float(p[1]), yaw))
        for _ in range(c.pedestrian_group):
            path, wait_s, light = self._ped_path(crossing=True)
            offsets = self._group_offsets(b.group_size)
            s0 = float(rng.uniform(0.0, 0.5 * wait_s)) if wait_s is not None else float(rng.uniform(0, 10))
            self.walkers.append([
                _Walker(self._new_id(), path, s0, b.ped_speed, off, wait_s, light) for off in offsets
            ])
        for _ in range(c.passer_by):
            path, _, _ = self._ped_path(crossing=False)
            speed = b.ped_speed * float(rng.uniform(0.9, 1.1))
            s0 = float(rng.uniform(0.0, 0.5 * path.length))
            self.walkers.append([_Walker(self._new_id(), path, s0, speed, np.zeros(2))])
        for ob in m.static_obstacles:
            self.statics.append(_Static(self._new_id(), NodeClass.Obstacle, ob.position[0],
                                        ob.position[1], ob.yaw))

    def _parking_spot(self):
        m, rng = self.m, self.rng
        for _ in range(100):
            ln = m.lanes[int(rng.integers(len(m.lanes)))]
            s = float(rng.uniform(0.05, 0.95) * ln.line.length)
            t = ln.line.tangent_at(s)
            p = ln.line.point_at(s) + np.array([t[1], -t[0]]) * ln.width
            if any(_inside_any(p, poly, 20.0) for poly in m.intersections):
                continue
            if any(point_in_polygon(p, poly) for poly in m.lane_polygons.values()):
                continue
            if any(math.hypot(p[0] - o.x, p[1] - o.y) < 6.0 for o in self.statics):
                continue
            return p, ln.line.heading_at(s)
        return None

    def _group_offsets(self, n: int) -> list[np.ndarray]:
        r = self.b.group_spread / 2
        out = []
        for _ in range(n):
            rad = r * math.sqrt(float(self.rng.random()))
            ang = float(self.rng.uniform(-math.pi, math.pi))
            out.append(np.array([rad * math.cos(ang), rad * math.sin(ang)]))
        return out

    def _ped_path(self, crossing: bool):
        m, rng = self.m, self.rng
        if crossing and m.crosswalks:
            cw = m.crosswalks[int(rng.integers(len(m.crosswalks)))]
            poly = cw.polygon
            center = poly.mean(axis=0)
            e1, e2 = poly[1] - poly[0], poly[2] - poly[1]
            u = e1 if np.hypot(*e1) >= np.hypot(*e2) else e2
            half = np.hypot(*u) / 2
            u = u / np.hypot(*u)
            if rng.random() < 0.5:
                u = -u
            road = np.array([-u[1], u[0]]) * (1 if rng.random() < 0.5 else -1)
            pa, pb = center - (half + 1.0) * u, center + (half + 1.0) * u
            lead = float(rng.uniform(6.0, 20.0))
            pts = [pa + lead * road, pa, pb, pb + 30.0 * road]
            light = next((tl for tl in m.traffic_lights if cw.id in tl.crosswalks), None)
            return Polyline(pts), lead, light
        ln = m.lanes[int(rng.integers(len(m.lanes)))]
        d = ln.width / 2 + (ln.width * 1.5 if len(m.lanes) > 2 else 4.5)
        side = ln.line.offset_polygon(d)[len(ln.line.points):][::-1]
        if rng.random() < 0.5:
            side = side[::-1]
        return Polyline(side), None, None

    # stepping
    def _vehicle_accel(self, veh: _Vehicle, t: float) -> tuple[float, float]:
        """(IDM acceleration, hard stop arc) for one vehicle at time t."""
        b, m = self.b, self.m
        best = idm_accel(veh.v, veh.v0, math.inf, 0.0, b)
        stop_at = math.inf
        for other in self.vehicles:
            if other is veh or other.lane != veh.lane or other.s <= veh.s:
                continue
            gap = other.s - veh.s - b.vehicle_length
            best = min(best, idm_accel(veh.v, veh.v0, gap, veh.v - other.v, b))
        for s_ob in self.obstacle_arcs.get(veh.lane, []):
            if s_ob > veh.s:
                gap = s_ob - veh.s - b.vehicle_length / 2
                best = min(best, idm_accel(veh.v, veh.v0, gap, veh.v, b))
        for tl in m.lights_for_lane(veh.lane):
            s_stop = m.stop_arc(tl, veh.lane)
            if s_stop < veh.s:
                continue
            state = tl.state_at(t)
            gap = s_stop - veh.s
            if state == "Red" or (state == "Yellow" and gap >= veh.v ** 2 / (2 * b.comfort_decel)):
                best = min(best, idm_accel(veh.v, veh.v0, gap, veh.v, b))
            if state == "Red" or tl.state_at(t + self.cfg.dt) == "Red":
                stop_at = min(stop_at, s_stop)
        return best, stop_at

    def run(self) -> list[SceneFrame]:
        dt, m = self.cfg.dt, self.m
        n = self.cfg.n_frames
        state: dict[int, dict] = {}
        for veh in self.vehicles:
            line = m.lane(veh.lane).line
            p, tan = line.point_at(veh.s), line.tangent_at(veh.s)
            state[veh.id] = dict(pos=p, vel=veh.v * tan, acc=np.zeros(2), yaw=line.heading_at(veh.s))
        for group in self.walkers:
            for w in group:
                p = w.path.point_at(w.s) + w.offset
                moving = not self._ped_blocked(w, 0.0)
                vel = w.speed * w.path.tangent_at(w.s) if moving else np.zeros(2)
                state[w.id] = dict(pos=p, vel=vel, acc=np.zeros(2), yaw=w.path.heading_at(w.s))
        frames = [self._emit(0.0, state)]
        for k in range(1, n):
            t_prev, t = (k - 1) * dt, k * dt
            new_v = {}
            for veh in self.vehicles:
                a, stop_at = self._vehicle_accel(veh, t_prev)
                v = max(0.0, veh.v + a * dt)
                if veh.s <= stop_at:
                    v = min(v, (stop_at - veh.s) / dt)
                new_v[veh.id] = v
            for veh in self.vehicles:
                veh.v = new_v[veh.id]
                veh.s = veh.s + veh.v * dt
                line = m.lane(veh.lane).line
                self._advance(state[veh.id], line.point_at(veh.s), dt, line.heading_at(veh.s))
            for group in self.walkers:
                for w in group:
                    if w.wait_s is not None and w.s <= w.wait_s and self._ped_blocked(w, t_prev):
                        w.s = min(w.s + w.speed * dt, w.wait_s)
                    else:
                        w.s = w.s + w.speed * dt
                    self._advance(state[w.id], w.path.point_at(w.s) + w.offset, dt, w.path.heading_at(w.s))
            frames.append(self._emit(t, state))
        return frames

    def _ped_blocked(self, w: _Walker, t: float) -> bool:
        if w.light is None or w.wait_s is None or w.s > w.wait_s:
            return False
        if w.s < w.wait_s - w.speed * self.cfg.dt:
            return False
        return pedestrian_state(w.light.state_at(t)) == "Red"

    @staticmethod
    def _advance(st: dict, new_pos: np.ndarray, dt: float, heading: float) -> None:
        vel = (new_pos - st["pos"]) / dt
        st["acc"] = (vel - st["vel"]) / dt
        st["vel"] = vel
        st["pos"] = new_pos
        st["yaw"] = heading

    def _emit(self, t: float, state: dict) -> SceneFrame:
        objs = []
        lane_of = {v.id: v.lane for v in self.vehicles}
        for veh in self.vehicles:
            objs.append(self._obj(veh.id, NodeClass.Vehicle, state[veh.id], lane_of[veh.id]))
        for group in self.walkers:
            for w in group:
                objs.append(self._obj(w.id, NodeClass.Human, state[w.id], None))
        for s in self.statics:
            objs.append(ObjectState(s.id, s.cls, s.x, s.y, yaw=wrap_angle(s.yaw)))
        objs.sort(key=lambda o: o.id)
        lights = {tl.id: tl.state_at(t) for tl in self.m.traffic_lights}
        return SceneFrame(t, tuple(objs), lights)

    @staticmethod
    def _obj(oid: int, cls: NodeClass, st: dict, lane: int | None) -> ObjectState:
        p, v, a = st["pos"], st["vel"], st["acc"]
        return ObjectState(oid, cls, float(p[0]), float(p[1]), float(v[0]), float(v[1]),
                           float(a[0]), float(a[1]), wrap_angle(st["yaw"]), 0.0, 0.0, lane)


def _inside_any(p, poly, margin: float) -> bool:
    lo, hi = poly.min(axis=0) - margin, poly.max(axis=0) + margin
    return bool((p >= lo).all() and (p <= hi).all())


def simulate(m: RoadMap, cfg: ScenarioConfig) -> list[SceneFrame]:
    """Run one scenario; identical (map, cfg) give bitwise-identical frames."""
    return _Scene(m, cfg).run()


# -- scene files -------------------------------------------------------------------

def frame_to_doc(f: SceneFrame) -> dict:
    return {
        "version": SCENE_VERSION,
        "t": f.t,
        "lights": {str(k): v for k, v in sorted(f.light_states.items())},
        "objects": [
            {"id": o.id, "class": o.cls.value, "x": o.x, "y": o.y, "vx": o.vx, "vy": o.vy,
             "ax": o.ax, "ay": o.ay, "yaw": o.yaw, "pitch": o.pitch, "roll": o.roll,
             "lane_id": o.lane_id}
            for o in f.objects
        ],
    }


def frame_from_doc(doc: dict) -> SceneFrame:
    if doc.get("version") != SCENE_VERSION:
        raise SchemaVersionError(f"scene version {doc.get('version')!r}, expected {SCENE_VERSION}")
    try:
        objs = tuple(
            ObjectState(int(o["id"]), NodeClass(o["class"]), float(o["x"]), float(o["y"]),
                        float(o["vx"]), float(o["vy"]), float(o["ax"]), float(o["ay"]),
                        float(o["yaw"]), float(o["pitch"]), float(o["roll"]), o.get("lane_id"))
            for o in doc["objects"]
        )
        lights = {int(k): str(v) for k, v in doc["lights"].items()}
        return SceneFrame(float(doc["t"]), objs, lights)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scene frame: {exc}") from None


def frames_to_jsonl(frames: list[SceneFrame]) -> str:
    return "".join(json.dumps(frame_to_doc(f), sort_keys=True, separators=(",", ":")) + "\n"
                   for f in frames)


def frames_from_jsonl(text: str) -> list[SceneFrame]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno} column {exc.colno}: {exc.msg}") from None
        out.append(frame_from_doc(doc))
    return out
