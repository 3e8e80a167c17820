"""Microscopic IoV world on a one-way Manhattan grid.

Eastbound streets run along each junction row, southbound streets along
each column. Every street is one route: an entry lane, one lane between each
pair of junctions, and an exit lane. One traffic light per junction gives
green to the eastbound approach while the southbound approach sees red, and
the other way round.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from ..errors import InvalidConfig, UnknownEntity
from ..events import (
    Event,
    EventType,
    FeedbackCommand,
    SetSensorSampling,
    SetSignalTiming,
    SetSpeedLimit,
)
from . import kernels

EPS = 1e-9


@dataclass
class SimConfig:
    sensors: int = 5
    seed: int = 0
    rows: int = 2
    cols: int = 2
    spacing: float = 200.0
    dt: float = 0.5
    accel: float = 2.0
    decel: float = 4.5
    v_max: float = 13.89
    veh_len: float = 5.0
    min_gap: float = 2.5
    arrival_rate: float = 0.08  # vehicles per second per street
    report_period: float = 10.0  # vehicle (E1) report cadence
    green: float = 30.0
    red: float = 30.0
    sensor_periods: tuple = (10.0, 20.0, 30.0)

    def validate(self):
        problems = {}
        if not isinstance(self.sensors, int) or self.sensors < 1:
            problems["sensors"] = f"must be a positive integer, got {self.sensors!r}"
        for name in ("rows", "cols"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                problems[name] = f"must be a positive integer, got {v!r}"
        for name in ("spacing", "dt", "accel", "decel", "v_max", "veh_len",
                     "report_period", "green", "red"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                problems[name] = f"must be > 0, got {v!r}"
        if self.min_gap < 0:
            problems["min_gap"] = "must be >= 0"
        if self.arrival_rate < 0:
            problems["arrival_rate"] = "must be >= 0"
        if not self.sensor_periods or any(p <= 0 for p in self.sensor_periods):
            problems["sensor_periods"] = "must be a non-empty list of positive periods"
        if problems:
            raise InvalidConfig(problems)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfig({k: "unknown field" for k in sorted(extra)})
        d = dict(d)
        if "sensor_periods" in d:
            d["sensor_periods"] = tuple(float(p) for p in d["sensor_periods"])
        return cls(**d)


# --- network ------------------------------------------------------------------

@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    speed_limit: float
    successors: tuple
    start: tuple
    end: tuple
    light: Optional[str] = None
    # True when this lane gets green while its light is in the Green phase
    primary: bool = True

    def point_at(self, s):
        f = s / self.length
        return (self.start[0] + f * (self.end[0] - self.start[0]),
                self.start[1] + f * (self.end[1] - self.start[1]))


@dataclass(frozen=True)
class Junction:
    id: str
    incoming: tuple
    traffic_light: Optional[str]
    location: tuple


@dataclass(frozen=True)
class RoadNetwork:
    lanes: tuple
    junctions: tuple
    routes: tuple  # tuples of lane ids, one per street

    def __post_init__(self):
        ids = {l.id for l in self.lanes}
        if len(ids) != len(self.lanes):
            raise InvalidConfig("duplicate lane ids")
        for l in self.lanes:
            if l.length <= 0 or l.speed_limit <= 0:
                raise InvalidConfig({l.id: "lane length and speed limit must be > 0"})
            for s in l.successors:
                if s not in ids:
                    raise InvalidConfig({l.id: f"successor {s} does not exist"})
        for j in self.junctions:
            for s in j.incoming:
                if s not in ids:
                    raise InvalidConfig({j.id: f"incoming lane {s} does not exist"})

    def lane_index(self):
        return {l.id: i for i, l in enumerate(self.lanes)}

    def locate(self, x, y):
        """Id of the lane whose centre line is closest to ``(x, y)``."""
        best, best_d = None, math.inf
        for l in self.lanes:
            (x0, y0), (x1, y1) = l.start, l.end
            dx, dy = x1 - x0, y1 - y0
            f = ((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy)
            f = min(1.0, max(0.0, f))
            d = math.hypot(x - (x0 + f * dx), y - (y0 + f * dy))
            if d < best_d - 1e-12:
                best, best_d = l.id, d
        return best


def grid_network(cfg: SimConfig) -> RoadNetwork:
    R, C, S = cfg.rows, cfg.cols, cfg.spacing
    jloc = {(r, c): (c * S, -r * S) for r in range(R) for c in range(C)}
    lanes, routes = [], []
    incoming = {rc: [] for rc in jloc}

    def street(prefix, points, ends_at):
        ids = [f"{prefix}_{k}" for k in range(len(points) - 1)]
        for k in range(len(points) - 1):
            rc = ends_at[k]
            light = f"TL_{rc[0]}_{rc[1]}" if rc is not None else None
            lanes.append(Lane(
                id=ids[k], length=math.dist(points[k], points[k + 1]),
                speed_limit=cfg.v_max,
                successors=(ids[k + 1],) if k + 1 < len(ids) else (),
                start=points[k], end=points[k + 1], light=light,
                primary=prefix.startswith("E")))
            if rc is not None:
                incoming[rc].append(ids[k])
        routes.append(tuple(ids))

    for r in range(R):
        y = -r * S
        pts = [(-S, y)] + [jloc[(r, c)] for c in range(C)] + [(C * S, y)]
        street(f"E{r}", pts, [(r, c) for c in range(C)] + [None])
    for c in range(C):
        x = c * S
        pts = [(x, S)] + [jloc[(r, c)] for r in range(R)] + [(x, -R * S)]
        street(f"S{c}", pts, [(r, c) for r in range(R)] + [None])

    junctions = tuple(
        Junction(id=f"J_{r}_{c}", incoming=tuple(incoming[(r, c)]),
                 traffic_light=f"TL_{r}_{c}", location=jloc[(r, c)])
        for r in range(R) for c in range(C))
    return RoadNetwork(lanes=tuple(lanes), junctions=junctions, routes=tuple(routes))


# --- entities -----------------------------------------------------------------

@dataclass(frozen=True)
class Vehicle:
    id: str
    lane: str
    position: float
    speed: float
    route: tuple


@dataclass
class IoTSensor:
    id: str
    location: tuple
    lane: str
    sampling_period: float
    last_report: float = 0.0
    next_due: float = 0.0


@dataclass
class TrafficLight:
    id: str
    lane: str
    red_duration: float
    green_duration: float
    phase: str = "Green"
    phase_elapsed: float = 0.0
    location: tuple = (0.0, 0.0)

    @property
    def duration_rate(self):
        return self.green_duration / (self.green_duration + self.red_duration)

    def active_duration(self):
        return self.green_duration if self.phase == "Green" else self.red_duration


@dataclass
class _Report:
    t: float
    type: EventType
    entity_id: str
    x: float
    y: float
    t_start: float
    lane: Optional[str] = None
    speed: Optional[float] = None
    duration_rate: Optional[float] = None

    def to_event(self):
        return Event(type=self.type, entity_id=self.entity_id, x=self.x, y=self.y,
                     t_start=self.t_start, t_end=self.t, lane=self.lane,
                     speed=self.speed, duration_rate=self.duration_rate)


# --- world --------------------------------------------------------------------

class World:
    """Mutable simulation state; vehicles are held as id-sorted arrays."""

    REPORT_LOG_SPAN = 60.0

    def __init__(self, cfg: SimConfig, network: RoadNetwork):
        self.cfg = cfg
        self.network = network
        self.t = 0.0
        self.steps = 0
        self._lidx = network.lane_index()
        self.lane_len = np.array([l.length for l in network.lanes], dtype=np.float64)
        self.lane_limit = np.array([l.speed_limit for l in network.lanes], dtype=np.float64)
        maxlen = max(len(r) for r in network.routes)
        self.routes = np.full((len(network.routes), maxlen), -1, dtype=np.int_)
        for i, r in enumerate(network.routes):
            self.routes[i, :len(r)] = [self._lidx[l] for l in r]
        self.route_len = np.array([len(r) for r in network.routes], dtype=np.int_)

        self.lights: dict = {}
        self.sensors: dict = {}

        self.vid: list = []
        self.v_lane = np.zeros(0, dtype=np.int_)
        self.v_pos = np.zeros(0)
        self.v_speed = np.zeros(0)
        self.v_ridx = np.zeros(0, dtype=np.int_)
        self.v_route = np.zeros(0, dtype=np.int_)
        self.v_last_report = np.zeros(0)
        self.v_next_report = np.zeros(0)
        self._next_vid = 0
        self.retired = 0

        self.rng = np.random.default_rng(cfg.seed)
        self.next_arrival = [self._draw_gap() for _ in network.routes]
        self.pending = [0] * len(network.routes)
        self.reports: list = []

    # arrival process
    def _draw_gap(self):
        if self.cfg.arrival_rate <= 0:
            return math.inf
        return float(self.rng.exponential(1.0 / self.cfg.arrival_rate))

    # views
    @property
    def vehicles(self):
        out = []
        for i, vid in enumerate(self.vid):
            r = self.network.routes[int(self.v_route[i])]
            out.append(Vehicle(vid, self.network.lanes[int(self.v_lane[i])].id,
                               float(self.v_pos[i]), float(self.v_speed[i]), r))
        return out

    def lane(self, lane_id) -> Lane:
        return self.network.lanes[self._lidx[lane_id]]

    def speed_limit(self, lane_id) -> float:
        return float(self.lane_limit[self._lidx[lane_id]])

    def lane_red(self):
        red = np.zeros(len(self.network.lanes), dtype=np.int_)
        for i, l in enumerate(self.network.lanes):
            if l.light is None:
                continue
            green_main = self.lights[l.light].phase == "Green"
            red[i] = 0 if green_main == l.primary else 1
        return red

    def add_vehicle(self, route_index, lane_pos=0, position=0.0, speed=0.0,
                    spawn_t=None) -> str:
        vid = f"v{self._next_vid:06d}"
        self._next_vid += 1
        t0 = self.t if spawn_t is None else spawn_t
        self.vid.append(vid)
        self.v_lane = np.append(self.v_lane, self.routes[route_index, lane_pos])
        self.v_pos = np.append(self.v_pos, float(position))
        self.v_speed = np.append(self.v_speed, float(speed))
        self.v_ridx = np.append(self.v_ridx, lane_pos)
        self.v_route = np.append(self.v_route, route_index)
        self.v_last_report = np.append(self.v_last_report, t0)
        self.v_next_report = np.append(self.v_next_report, t0 + self.cfg.report_period)
        return vid

    def _drop(self, keep):
        self.vid = [v for v, k in zip(self.vid, keep) if k]
        for name in ("v_lane", "v_pos", "v_speed", "v_ridx", "v_route",
                     "v_last_report", "v_next_report"):
            setattr(self, name, getattr(self, name)[keep])

    def state_dict(self):
        """Complete state as plain data; equal dicts mean identical worlds."""
        return {
            "t": self.t, "steps": self.steps,
            "lane_limit": self.lane_limit.tolist(),
            "lights": [[l.id, l.phase, l.phase_elapsed, l.green_duration, l.red_duration]
                       for l in self.lights.values()],
            "sensors": [[s.id, s.sampling_period, s.last_report, s.next_due]
                        for s in self.sensors.values()],
            "vehicles": [self.vid, self.v_lane.tolist(), self.v_pos.tolist(),
                         self.v_speed.tolist(), self.v_ridx.tolist(),
                         self.v_route.tolist(), self.v_next_report.tolist()],
            "next_arrival": self.next_arrival, "pending": self.pending,
            "next_vid": self._next_vid, "retired": self.retired,
            "rng": self.rng.bit_generator.state,
        }

    def state_bytes(self) -> bytes:
        return json.dumps(self.state_dict(), sort_keys=True, default=str).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()


def build_network(cfg: SimConfig) -> World:
    cfg.validate()
    net = grid_network(cfg)
    world = World(cfg, net)
    lane_of_light = {}
    for l in net.lanes:
        if l.light is not None and l.primary:
            lane_of_light[l.light] = l.id
    for j, junc in enumerate(net.junctions):
        lid = junc.traffic_light
        world.lights[lid] = TrafficLight(
            id=lid, lane=lane_of_light[lid], red_duration=cfg.red,
            green_duration=cfg.green, phase="Green",
            phase_elapsed=(j * 11.0) % cfg.green, location=junc.location)

    nl = len(net.lanes)
    per_lane = [0] * nl
    for k in range(cfg.sensors):
        per_lane[k % nl] += 1
    for k in range(cfg.sensors):
        lane = net.lanes[k % nl]
        m = k // nl
        s = lane.length * (m + 1) / (per_lane[k % nl] + 1)
        period = float(cfg.sensor_periods[k % len(cfg.sensor_periods)])
        slots = max(1, int(round(period / cfg.dt)))
        first = cfg.dt * (1 + (k * 7) % slots)
        world.sensors[f"S{k:03d}"] = IoTSensor(
            id=f"S{k:03d}", location=lane.point_at(s), lane=lane.id,
            sampling_period=period, last_report=max(0.0, first - period),
            next_due=first)
    return world


# --- dynamics -----------------------------------------------------------------

def update_vehicle(v: Vehicle, leader=None, light_ahead=None, limit=None, dt=0.5,
                   network: Optional[RoadNetwork] = None, accel=2.0, decel=4.5):
    """One car-following update for a single vehicle.

    ``leader`` is ``(gap, leader_speed)`` where gap is the usable distance to
    the leader (bumper gap less the standstill gap). ``light_ahead`` is
    ``(distance, phase)``. Returns ``(vehicle, retired)``; lane handoff along
    the route needs ``network``.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    gap, vl = leader if leader is not None else (0.0, 0.0)
    red = light_ahead is not None and light_ahead[1] == "Red"
    dist = light_ahead[0] if light_ahead is not None else 0.0
    vn = kernels.next_speed(v.speed, limit, leader is not None, gap, vl, red, dist,
                            dt, accel, decel)
    p = v.position + vn * dt
    if network is None:
        return replace(v, position=p, speed=vn), False
    lane = network.lanes[network.lane_index()[v.lane]]
    if p > lane.length:
        k = v.route.index(v.lane) + 1
        if k < len(v.route):
            return replace(v, lane=v.route[k], position=p - lane.length, speed=vn), False
        return replace(v, position=lane.length, speed=vn), True
    return replace(v, position=p, speed=vn), False


def step(world: World, dt: Optional[float] = None) -> World:
    """Advance the world by one step (in place) and return it."""
    cfg = world.cfg
    dt = cfg.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be > 0")
    t_new = world.t + dt
    new_reports = []

    for light in world.lights.values():
        light.phase_elapsed += dt
        dur = light.active_duration()
        if light.phase_elapsed >= dur - EPS:
            light.phase_elapsed = max(0.0, light.phase_elapsed - dur)
            light.phase = "Red" if light.phase == "Green" else "Green"
            lane = world.lane(light.lane)
            new_reports.append(_Report(
                t=t_new, type=EventType.E3, entity_id=light.id,
                x=light.location[0], y=light.location[1], t_start=max(0.0, t_new - dur),
                lane=lane.id, duration_rate=light.duration_rate))

    n = len(world.vid)
    if n:
        order = np.lexsort((-world.v_pos, world.v_lane))
        retired = kernels.step_vehicles(
            order, world.v_lane, world.v_pos, world.v_speed, world.v_ridx,
            world.v_route, world.routes, world.route_len, world.lane_len,
            world.lane_limit, world.lane_red(), dt, cfg.accel, cfg.decel,
            cfg.veh_len, cfg.min_gap)
        retired = np.asarray(retired, dtype=bool)
        if retired.any():
            world.retired += int(retired.sum())
            world._drop(~retired)

    world.t = t_new
    world.steps += 1
    _spawn(world)

    lanes = world.network.lanes
    due = np.nonzero(world.v_next_report <= t_new + EPS)[0]
    for i in due:
        lane = lanes[int(world.v_lane[i])]
        x, y = lane.point_at(float(world.v_pos[i]))
        new_reports.append(_Report(
            t=t_new, type=EventType.E1, entity_id=world.vid[i], x=x, y=y,
            t_start=float(world.v_last_report[i]), speed=float(world.v_speed[i])))
        world.v_last_report[i] = t_new
        world.v_next_report[i] = t_new + cfg.report_period
    for s in world.sensors.values():
        if s.next_due <= t_new + EPS:
            new_reports.append(_Report(
                t=t_new, type=EventType.E2, entity_id=s.id, x=s.location[0],
                y=s.location[1], t_start=s.last_report, lane=s.lane))
            s.last_report = t_new
            s.next_due = t_new + s.sampling_period

    world.reports.extend(new_reports)
    horizon = t_new - World.REPORT_LOG_SPAN
    if world.reports and world.reports[0].t < horizon:
        world.reports = [r for r in world.reports if r.t >= horizon]
    return world


def _spawn(world: World):
    cfg = world.cfg
    for r in range(len(world.network.routes)):
        while world.next_arrival[r] <= world.t + EPS:
            world.pending[r] += 1
            world.next_arrival[r] += world._draw_gap()
        if not world.pending[r]:
            continue
        entry = world.routes[r, 0]
        on = np.nonzero(world.v_lane == entry)[0]
        limit = float(world.lane_limit[entry])
        if len(on):
            rear = on[np.argmin(world.v_pos[on])]
            gap = float(world.v_pos[rear]) - cfg.veh_len - cfg.min_gap
            if gap < 0:
                continue
            speed = kernels.next_speed(limit, limit, True, gap, float(world.v_speed[rear]),
                                       False, 0.0, cfg.dt, 0.0, cfg.decel)
        else:
            speed = limit
        world.pending[r] -= 1
        world.add_vehicle(r, 0, 0.0, speed)


_TYPE_ORDER = {EventType.E1: 0, EventType.E2: 1, EventType.E3: 2}


def emit_events(world: World, window) -> list:
    """Events recorded in ``(t_start, t_end]``: E1 by id, then E2, then E3."""
    t0, t1 = window
    if t0 > t1:
        raise ValueError("window start after end")
    sel = [r for r in world.reports if t0 + EPS < r.t <= t1 + EPS]
    sel.sort(key=lambda r: (_TYPE_ORDER[r.type], r.entity_id, r.t))
    return [r.to_event() for r in sel]


def apply_command(world: World, cmd: FeedbackCommand) -> World:
    """Change one configuration value; it takes effect from the next step."""
    if isinstance(cmd, SetSpeedLimit):
        if cmd.lane not in world._lidx:
            raise UnknownEntity(f"lane {cmd.lane}")
        world.lane_limit[world._lidx[cmd.lane]] = cmd.limit
    elif isinstance(cmd, SetSignalTiming):
        light = world.lights.get(cmd.light)
        if light is None:
            raise UnknownEntity(f"traffic light {cmd.light}")
        light.green_duration = cmd.green
        light.red_duration = cmd.red
    elif isinstance(cmd, SetSensorSampling):
        s = world.sensors.get(cmd.sensor)
        if s is None:
            raise UnknownEntity(f"sensor {cmd.sensor}")
        s.sampling_period = cmd.period
        s.next_due = s.last_report + cmd.period
    else:
        raise TypeError(f"not a feedback command: {cmd!r}")
    return world


def congestion_index(world: World) -> float:
    """1 - mean(speed / lane limit); 0 for an empty world."""
    if not world.vid:
        return 0.0
    ratio = world.v_speed / world.lane_limit[world.v_lane]
    return float(min(1.0, max(0.0, 1.0 - ratio.mean())))


def mean_speed_ratio(world: World) -> float:
    if not world.vid:
        return 1.0
    return float(np.clip(world.v_speed / world.cfg.v_max, 0, 1).mean())
