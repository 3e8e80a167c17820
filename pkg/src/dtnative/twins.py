"""XML-backed digital twin store.

Document layout, one file per twin::

    <twin id="S003" type="E2">
      <state ts="20.0" x="..." y="..." lane="E0_1" period_s="10.0"/>
      ...
    </twin>

Speeds are stored in km/h with two decimals; every other number uses the
shortest repr that round-trips.
"""

from __future__ import annotations

import copy
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

from .errors import SchemaViolation, StaleEvent
from .events import Event, EventType

DEFAULT_HISTORY = 1024

# attribute name -> kind ("f" float, "s" string, "k" km/h with 2 decimals)
SCHEMA = {
    EventType.E1: (("x", "f"), ("y", "f"), ("speed_kmh", "k")),
    EventType.E2: (("x", "f"), ("y", "f"), ("lane", "s"), ("period_s", "f")),
    EventType.E3: (("x", "f"), ("y", "f"), ("lane", "s"), ("duration_rate", "f")),
}


def attributes_from_event(ev: Event) -> dict:
    if ev.type is EventType.E1:
        return {"x": ev.x, "y": ev.y, "speed_kmh": round(ev.speed * 3.6, 2)}
    if ev.type is EventType.E2:
        return {"x": ev.x, "y": ev.y, "lane": ev.lane, "period_s": ev.t_end - ev.t_start}
    return {"x": ev.x, "y": ev.y, "lane": ev.lane, "duration_rate": ev.duration_rate}


@dataclass
class TwinInstance:
    entity_id: str
    entity_type: EventType
    history: deque = field(default_factory=deque)
    bound: int = DEFAULT_HISTORY

    @property
    def attributes(self) -> dict:
        return self.history[-1][1]

    @property
    def last_ts(self) -> float:
        return self.history[-1][0]

    def append(self, ts: float, attrs: dict):
        if self.history and ts <= self.history[-1][0]:
            raise StaleEvent(f"{self.entity_id}: ts {ts} <= {self.history[-1][0]}")
        self.history.append((ts, attrs))
        while len(self.history) > self.bound:
            self.history.popleft()

    def __eq__(self, other):
        if not isinstance(other, TwinInstance):
            return NotImplemented
        return (self.entity_id == other.entity_id
                and self.entity_type == other.entity_type
                and list(self.history) == list(other.history))


def _fmt(kind, v):
    if kind == "k":
        return f"{v:.2f}"
    if kind == "f":
        return repr(float(v))
    return v


def serialize_twin(t: TwinInstance) -> str:
    if not t.history:
        raise ValueError("a twin must have at least one state entry")
    schema = SCHEMA[t.entity_type]
    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             f"<twin id={quoteattr(t.entity_id)} type={quoteattr(t.entity_type.value)}>"]
    for ts, attrs in t.history:
        parts = [f"ts={quoteattr(repr(float(ts)))}"]
        parts += [f"{name}={quoteattr(_fmt(kind, attrs[name]))}" for name, kind in schema]
        lines.append(f"  <state {' '.join(parts)}/>")
    lines.append("</twin>")
    return "\n".join(lines) + "\n"


def parse_twin(xml: str, bound: int = DEFAULT_HISTORY) -> TwinInstance:
    parser = expat.ParserCreate()
    stack, found = [], {"twin": None, "states": []}

    def start(name, attrs):
        line = parser.CurrentLineNumber
        if not stack:
            if name != "twin":
                raise SchemaViolation(f"root element must be <twin>, got <{name}>", line, name)
            found["twin"] = (attrs, line)
        elif name == "state" and stack == ["twin"]:
            found["states"].append((attrs, line))
        else:
            raise SchemaViolation(f"unexpected element <{name}>", line, name)
        stack.append(name)

    def end(name):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(xml, True)
    except expat.ExpatError as exc:
        raise SchemaViolation(f"malformed XML: {expat.ErrorString(exc.code)}", exc.lineno) from None

    attrs, line = found["twin"]
    if "id" not in attrs:
        raise SchemaViolation("missing id attribute", line, "twin")
    try:
        etype = EventType(attrs.get("type"))
    except ValueError:
        raise SchemaViolation(f"bad type attribute {attrs.get('type')!r}", line, "twin") from None
    if set(attrs) != {"id", "type"}:
        raise SchemaViolation(f"unexpected attributes {sorted(set(attrs) - {'id', 'type'})}",
                              line, "twin")
    if not found["states"]:
        raise SchemaViolation("twin has no <state> entries", line, "twin")

    schema = SCHEMA[etype]
    want = {"ts"} | {n for n, _ in schema}
    twin = TwinInstance(attrs["id"], etype, bound=bound)
    for sattrs, sline in found["states"]:
        if set(sattrs) != want:
            raise SchemaViolation(f"state attributes {sorted(sattrs)} != {sorted(want)}",
                                  sline, "state")
        try:
            ts = float(sattrs["ts"])
            values = {n: (sattrs[n] if k == "s" else float(sattrs[n])) for n, k in schema}
        except ValueError as exc:
            raise SchemaViolation(f"bad number: {exc}", sline, "state") from None
        try:
            twin.append(ts, values)
        except StaleEvent:
            raise SchemaViolation("history timestamps must strictly increase",
                                  sline, "state") from None
    return twin


class TwinRepository:
    """One twin per entity, persisted as ``<type>_<id>.xml`` under ``root_dir``."""

    def __init__(self, root_dir=None, history_bound: int = DEFAULT_HISTORY):
        self.root_dir = Path(root_dir) if root_dir is not None else None
        self.history_bound = history_bound
        self.twins: dict = {}
        self.stale_dropped = 0
        self._dirty: set = set()

    def upsert(self, event: Event) -> TwinInstance:
        twin = self.twins.get(event.entity_id)
        if twin is None:
            twin = TwinInstance(event.entity_id, event.type, bound=self.history_bound)
            self.twins[event.entity_id] = twin
        elif twin.entity_type is not event.type:
            raise ValueError(f"{event.entity_id} is a {twin.entity_type.value} twin")
        try:
            twin.append(event.t_end, attributes_from_event(event))
        except StaleEvent:
            self.stale_dropped += 1
            if not twin.history:
                del self.twins[event.entity_id]
            raise
        self._dirty.add(event.entity_id)
        return twin

    def query(self, type=None, id=None, time_range=None) -> list:
        out = []
        for tid in sorted(self.twins):
            t = self.twins[tid]
            if type is not None and t.entity_type is not EventType(type):
                continue
            if id is not None and tid != id:
                continue
            if time_range is not None:
                lo, hi = time_range
                if not any(lo <= ts <= hi for ts, _ in t.history):
                    continue
            out.append(copy.deepcopy(t))
        return out

    def latest(self, type=None):
        """Cheap read of ``(id, ts, attributes)`` without copying histories."""
        et = EventType(type) if type is not None else None
        return [(tid, t.last_ts, t.attributes) for tid, t in sorted(self.twins.items())
                if et is None or t.entity_type is et]

    @staticmethod
    def filename(t: TwinInstance) -> str:
        return f"{t.entity_type.value}_{t.entity_id}.xml"

    def flush(self):
        if self.root_dir is None:
            self._dirty.clear()
            return 0
        self.root_dir.mkdir(parents=True, exist_ok=True)
        n = 0
        for tid in sorted(self._dirty):
            t = self.twins[tid]
            path = self.root_dir / self.filename(t)
            tmp = path.with_suffix(".xml.tmp")
            tmp.write_text(serialize_twin(t), encoding="utf-8")
            os.replace(tmp, path)
            n += 1
        self._dirty.clear()
        return n

    @classmethod
    def load(cls, root_dir, history_bound: int = DEFAULT_HISTORY) -> "TwinRepository":
        repo = cls(root_dir, history_bound)
        for path in sorted(Path(root_dir).glob("*.xml")):
            t = parse_twin(path.read_text(encoding="utf-8"), history_bound)
            repo.twins[t.entity_id] = t
        return repo

    def __len__(self):
        return len(self.twins)
