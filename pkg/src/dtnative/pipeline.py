"""Event Publisher, Event Broker and Event Reactor.

The publisher relays streamed events while its STREAM flag is set. The
broker keeps one bounded FIFO per event type, counts per-window occurrences
and turns them into densities (occurrences in the window divided by queue
capacity, clamped to [0, 1]), then chooses between forwarding and a single
feedback command. The reactor wraps commands as Feedback wire messages.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidCommand
from .events import (
    EVENT_TYPES,
    GREEN_RATIO_BOUNDS,
    SAMPLING_PERIOD_BOUNDS,
    SPEED_LIMIT_BOUNDS,
    Event,
    EventType,
    FeedbackCommand,
    SetSensorSampling,
    SetSignalTiming,
    SetSpeedLimit,
)
from .wire import AWAKE, Message, feedback

DEFAULT_THRESHOLD = 0.8
DEFAULT_CAPACITY = 64
SPEED_FACTOR = 0.8
GREEN_FACTOR = 1.25
SAMPLING_FACTOR = 2.0


class PublisherState:
    """Event Publisher: forwards while STREAM is set, otherwise drops and counts."""

    def __init__(self, stream: bool = True):
        self.stream = stream
        self.dropped = 0
        self.forwarded = 0

    def relay(self, event: Event) -> Optional[Event]:
        if not self.stream:
            self.dropped += 1
            return None
        self.forwarded += 1
        return event

    def signal(self, sig):
        """Apply a broker control signal (``StreamReset`` or an Awake message)."""
        if sig is StreamReset.RESET:
            self.stream = False
        elif isinstance(sig, Message) and sig == AWAKE:
            self.stream = True
        else:
            raise ValueError(f"unexpected publisher signal {sig!r}")


def publisher_relay(ep: PublisherState, event: Event):
    return ep, ep.relay(event)


class StreamReset(enum.Enum):
    RESET = "reset"


@dataclass
class EventQueue:
    event_type: EventType
    capacity: int = DEFAULT_CAPACITY
    items: deque = field(default_factory=deque)
    total_enqueued_in_window: int = 0
    overflow_drops: int = 0

    def push(self, event: Event) -> Optional[Event]:
        evicted = None
        if len(self.items) >= self.capacity:
            evicted = self.items.popleft()
            self.overflow_drops += 1
        self.items.append(event)
        self.total_enqueued_in_window += 1
        return evicted


@dataclass(frozen=True)
class DensityReport:
    rho: dict
    window: tuple
    counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class WorldStats:
    """Targets for feedback, as seen from the digital twin side."""
    lane: Optional[str] = None
    lane_limit: float = SPEED_LIMIT_BOUNDS[1]
    light: Optional[str] = None
    green: float = 30.0
    red: float = 30.0
    sensor: Optional[str] = None
    period: float = 10.0


@dataclass(frozen=True)
class FlowDecision:
    command: Optional[FeedbackCommand] = None

    @property
    def is_forward(self):
        return self.command is None

    @property
    def direction(self):
        return "Forward" if self.command is None else "Feedback"


FORWARD = FlowDecision()


class BrokerState:
    """Event Broker state: typed queues, STREAM bookkeeping, fault timer, thresholds."""

    def __init__(self, capacity=DEFAULT_CAPACITY, thresholds=None, recovery_period=5.0):
        caps = capacity if isinstance(capacity, dict) else {t: capacity for t in EVENT_TYPES}
        for t, c in caps.items():
            if c <= 0:
                raise ValueError(f"queue capacity for {t} must be > 0")
        self.queues = {EventType(t): EventQueue(EventType(t), int(caps[t])) for t in EVENT_TYPES}
        th = thresholds if thresholds is not None else {t: DEFAULT_THRESHOLD for t in EVENT_TYPES}
        self.thresholds = {EventType(t): float(v) for t, v in th.items()}
        for t, v in self.thresholds.items():
            if not 0.0 < v <= 1.0:
                raise ValueError(f"threshold for {t} must lie in (0, 1]")
        self.recovery_period = recovery_period
        self.stream_enabled = True
        self.recovering_until: Optional[float] = None
        self.rejected = 0

    @property
    def fault(self):
        return "Healthy" if self.recovering_until is None else "Recovering"

    @property
    def overflow_drops(self) -> int:
        return sum(q.overflow_drops for q in self.queues.values())

    def enqueue(self, event: Event, now: float) -> Optional[Event]:
        """Route an event to its typed queue.

        Returns the evicted event when the queue was full, ``None`` otherwise.
        Rejected (not queued) while recovering from a fault.
        """
        if self.recovering_until is not None:
            self.rejected += 1
            return None
        return self.queues[event.type].push(event)

    def accepting(self) -> bool:
        return self.recovering_until is None

    def density(self, event_type) -> float:
        q = self.queues[EventType(event_type)]
        return min(1.0, max(0.0, q.total_enqueued_in_window / q.capacity))

    def report(self, window=(0.0, 0.0)) -> DensityReport:
        return DensityReport(
            rho={t: self.density(t) for t in EVENT_TYPES}, window=tuple(window),
            counts={t: self.queues[t].total_enqueued_in_window for t in EVENT_TYPES})

    def close_window(self, window) -> DensityReport:
        rep = self.report(window)
        for q in self.queues.values():
            q.total_enqueued_in_window = 0
        return rep

    def drain(self, event_type=None) -> list:
        types = EVENT_TYPES if event_type is None else (EventType(event_type),)
        out = []
        for t in types:
            q = self.queues[t].items
            out.extend(q)
            q.clear()
        return out

    def backlog(self) -> int:
        return sum(len(q.items) for q in self.queues.values())

    def on_fault(self, now: float):
        """Enter recovery (restarting the timer if already recovering).

        Returns the stream-reset request for the publisher.
        """
        self.recovering_until = now + self.recovery_period
        self.stream_enabled = False
        return StreamReset.RESET

    def tick_recovery(self, now: float) -> Optional[Message]:
        if self.recovering_until is not None and now >= self.recovering_until:
            self.recovering_until = None
            self.stream_enabled = True
            return AWAKE
        return None


def broker_enqueue(b: BrokerState, event: Event, now: float) -> BrokerState:
    b.enqueue(event, now)
    return b


def compute_density(b: BrokerState, event_type) -> float:
    return b.density(event_type)


def decide_flow(b: BrokerState, report: DensityReport, stats: WorldStats) -> FlowDecision:
    """Forward unless a density exceeds its threshold; then one command, E1 > E3 > E2."""
    over = {t for t in EVENT_TYPES if report.rho[t] > b.thresholds[t]}
    if not over:
        return FORWARD
    if EventType.E1 in over and stats.lane is not None:
        limit = max(SPEED_LIMIT_BOUNDS[0], stats.lane_limit * SPEED_FACTOR)
        return FlowDecision(SetSpeedLimit(stats.lane, limit))
    if EventType.E3 in over and stats.light is not None:
        max_green = stats.red * GREEN_RATIO_BOUNDS[1] / (1.0 - GREEN_RATIO_BOUNDS[1])
        green = min(stats.green * GREEN_FACTOR, max_green)
        return FlowDecision(SetSignalTiming(stats.light, green, stats.red))
    if EventType.E2 in over and stats.sensor is not None:
        period = min(stats.period * SAMPLING_FACTOR, SAMPLING_PERIOD_BOUNDS[1])
        return FlowDecision(SetSensorSampling(stats.sensor, period))
    return FORWARD


class EventReactor:
    """Feedback interface towards the physical layer."""

    def __init__(self):
        self.sent = 0

    def apply(self, cmd: FeedbackCommand) -> Message:
        cmd.validate()
        self.sent += 1
        return feedback(cmd)


def reactor_apply(cmd: FeedbackCommand) -> Message:
    cmd.validate()
    return feedback(cmd)


class ConfigView:
    """The twin side's record of the physical configuration.

    Starts from the scenario config and follows every command the reactor
    sends; used to size feedback commands and pick their targets.
    """

    def __init__(self, network, sim_cfg):
        self.network = network
        self.lane_limit = {l.id: l.speed_limit for l in network.lanes}
        self.light_lane = {}
        for l in network.lanes:
            if l.light is not None:
                self.light_lane.setdefault(l.id, l.light)
        self.timing = {j.traffic_light: (sim_cfg.green, sim_cfg.red) for j in network.junctions}
        periods = sim_cfg.sensor_periods
        self.period = {f"S{k:03d}": float(periods[k % len(periods)])
                       for k in range(sim_cfg.sensors)}
        self._lane_cache = {}

    def record(self, cmd: FeedbackCommand):
        if isinstance(cmd, SetSpeedLimit):
            self.lane_limit[cmd.lane] = cmd.limit
        elif isinstance(cmd, SetSignalTiming):
            self.timing[cmd.light] = (cmd.green, cmd.red)
        elif isinstance(cmd, SetSensorSampling):
            self.period[cmd.sensor] = cmd.period

    def lane_at(self, x, y):
        key = (x, y)
        lane = self._lane_cache.get(key)
        if lane is None:
            lane = self.network.locate(x, y)
            if len(self._lane_cache) < 100_000:
                self._lane_cache[key] = lane
        return lane

    def stats(self, repo, since: float) -> WorldStats:
        """Feedback targets from twins updated after ``since``."""
        ratios = {}
        for _, ts, attrs in repo.latest(EventType.E1):
            if ts <= since:
                continue
            lane = self.lane_at(attrs["x"], attrs["y"])
            ratios.setdefault(lane, []).append(attrs["speed_kmh"] / 3.6 / self.lane_limit[lane])
        lane = None
        if ratios:
            lane = min(sorted(ratios), key=lambda l: sum(ratios[l]) / len(ratios[l]))
        light = self.light_lane.get(lane) if lane is not None else None
        if light is None and self.timing:
            light = min(self.timing)
        sensor = min(sorted(self.period), key=lambda s: self.period[s]) if self.period else None
        green, red = self.timing.get(light, (30.0, 30.0))
        return WorldStats(
            lane=lane, lane_limit=self.lane_limit.get(lane, SPEED_LIMIT_BOUNDS[1]),
            light=light, green=green, red=red, sensor=sensor,
            period=self.period.get(sensor, 10.0))
