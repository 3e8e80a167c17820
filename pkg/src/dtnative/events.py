"""Typed IoV event records and feedback commands.

Both travel over the wire as canonical JSON objects (sorted keys, compact
separators), so ``to_json``/``from_json`` here define the payload schema for
the StreamData and Feedback frames.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Optional, Union

from .errors import InvalidCommand, MalformedPayload

# action bounds shared by the reactor guard and the learner's action head
SPEED_LIMIT_BOUNDS = (5.0, 13.89)
GREEN_RATIO_BOUNDS = (0.2, 0.8)
SAMPLING_PERIOD_BOUNDS = (1.0, 30.0)


class EventType(str, enum.Enum):
    E1 = "E1"  # vehicle
    E2 = "E2"  # roadside sensor
    E3 = "E3"  # traffic light

    @property
    def index(self) -> int:
        return int(self.value[1]) - 1


EVENT_TYPES = (EventType.E1, EventType.E2, EventType.E3)


@dataclass(frozen=True)
class Event:
    type: EventType
    entity_id: str
    x: float
    y: float
    t_start: float
    t_end: float
    lane: Optional[str] = None
    speed: Optional[float] = None
    duration_rate: Optional[float] = None

    def __post_init__(self):
        t = EventType(self.type)
        object.__setattr__(self, "type", t)
        if self.t_start > self.t_end:
            raise ValueError(f"time interval reversed: {self.t_start} > {self.t_end}")
        has = (self.lane is not None, self.speed is not None, self.duration_rate is not None)
        want = {EventType.E1: (False, True, False),
                EventType.E2: (True, False, False),
                EventType.E3: (True, False, True)}[t]
        if has != want:
            raise ValueError(f"{t.value} event carries wrong attribute set")
        if t is EventType.E3 and not 0.0 < self.duration_rate < 1.0:
            raise ValueError(f"duration_rate {self.duration_rate} outside (0, 1)")

    @property
    def location(self):
        return (self.x, self.y)

    @property
    def interval(self):
        return (self.t_start, self.t_end)

    def to_dict(self) -> dict:
        d = {"type": self.type.value, "id": self.entity_id, "loc": [self.x, self.y],
             "t": [self.t_start, self.t_end]}
        if self.type is EventType.E1:
            d["speed"] = self.speed
        else:
            d["lane"] = self.lane
        if self.type is EventType.E3:
            d["rate"] = self.duration_rate
        return d

    @classmethod
    def from_dict(cls, d) -> "Event":
        if not isinstance(d, dict) or "type" not in d:
            raise MalformedPayload("event payload is not a typed object")
        try:
            t = EventType(d["type"])
        except ValueError:
            raise MalformedPayload(f"unknown event type {d['type']!r}") from None
        keys = {"type", "id", "loc", "t"}
        keys |= {"speed"} if t is EventType.E1 else {"lane"}
        if t is EventType.E3:
            keys.add("rate")
        if set(d) != keys:
            raise MalformedPayload(f"{t.value} payload keys {sorted(d)} != {sorted(keys)}")
        try:
            (x, y), (t0, t1) = d["loc"], d["t"]
            if not isinstance(d["id"], str):
                raise TypeError("id")
            return cls(
                type=t,
                entity_id=d["id"],
                x=_num(x), y=_num(y),
                t_start=_num(t0), t_end=_num(t1),
                lane=_str(d["lane"]) if "lane" in d else None,
                speed=_num(d["speed"]) if "speed" in d else None,
                duration_rate=_num(d["rate"]) if "rate" in d else None,
            )
        except (TypeError, ValueError) as exc:
            raise MalformedPayload(f"bad {t.value} payload: {exc}") from None


def _num(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("non-finite number")
    return v


def _str(v) -> str:
    if not isinstance(v, str):
        raise TypeError(f"expected string, got {v!r}")
    return v


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False,
                      ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class SetSpeedLimit:
    lane: str
    limit: float

    def validate(self):
        _check_range("speed limit", self.limit, SPEED_LIMIT_BOUNDS)


@dataclass(frozen=True)
class SetSignalTiming:
    light: str
    green: float
    red: float

    @property
    def green_ratio(self) -> float:
        return self.green / (self.green + self.red)

    def validate(self):
        if not (self.green > 0 and self.red > 0):
            raise InvalidCommand(f"signal durations must be positive: {self}")
        _check_range("green ratio", self.green_ratio, GREEN_RATIO_BOUNDS)


@dataclass(frozen=True)
class SetSensorSampling:
    sensor: str
    period: float

    def validate(self):
        _check_range("sampling period", self.period, SAMPLING_PERIOD_BOUNDS)


FeedbackCommand = Union[SetSpeedLimit, SetSignalTiming, SetSensorSampling]

_CMD_FIELDS = {
    "SetSpeedLimit": (SetSpeedLimit, ("lane", "limit")),
    "SetSignalTiming": (SetSignalTiming, ("light", "green", "red")),
    "SetSensorSampling": (SetSensorSampling, ("sensor", "period")),
}


def _check_range(name, value, bounds):
    lo, hi = bounds
    # small slack so values produced by float arithmetic at the edge are accepted
    if not (math.isfinite(value) and lo - 1e-9 <= value <= hi + 1e-9):
        raise InvalidCommand(f"{name} {value} outside [{lo}, {hi}]")


def command_to_dict(cmd: FeedbackCommand) -> dict:
    name = type(cmd).__name__
    _, fields = _CMD_FIELDS[name]
    d = {"cmd": name}
    for f in fields:
        d[f] = getattr(cmd, f)
    return d


def command_from_dict(d) -> FeedbackCommand:
    if not isinstance(d, dict) or d.get("cmd") not in _CMD_FIELDS:
        raise MalformedPayload(f"unknown feedback command {d!r}")
    cls, fields = _CMD_FIELDS[d["cmd"]]
    if set(d) != {"cmd", *fields}:
        raise MalformedPayload(f"{d['cmd']} payload keys {sorted(d)}")
    try:
        args = [_str(d[fields[0]])] + [_num(d[f]) for f in fields[1:]]
    except (TypeError, ValueError) as exc:
        raise MalformedPayload(f"bad {d['cmd']} payload: {exc}") from None
    return cls(*args)
