"""Twin-backed control environment for the learner.

One step is one pipeline window: the action goes out as Feedback frames
through the reactor, the world advances a window, and every event travels
encode -> decode -> publisher -> broker -> twin store. State and reward are
read from the window's density report and the twins it updated.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..events import EventType, SetSensorSampling, SetSignalTiming, SetSpeedLimit
from ..pipeline import BrokerState, ConfigView, EventReactor, PublisherState
from ..sim.world import SimConfig, apply_command, build_network, emit_events, step
from ..twins import TwinRepository
from ..wire import FrameBuffer, MsgKind, encode_frame, stream_data

SIGNAL_CYCLE = 60.0


class TwinEnv:
    def __init__(self, sim_cfg: SimConfig, window: float = 10.0, capacity: int = 64,
                 congestion_weight: float = 1.0, overflow_weight: float = 0.1):
        sim_cfg.validate()
        self.sim_cfg = sim_cfg
        self.window = window
        self.capacity = capacity
        self.congestion_weight = congestion_weight
        self.overflow_weight = overflow_weight
        self.steps_per_window = max(1, int(round(window / sim_cfg.dt)))
        self.applied = []  # every physical action sent, for bounds audits

    def reset(self):
        self.world = build_network(self.sim_cfg)
        self.view = ConfigView(self.world.network, self.sim_cfg)
        self.ep = PublisherState()
        self.broker = BrokerState(self.capacity)
        self.reactor = EventReactor()
        self.repo = TwinRepository()
        self.rx = FrameBuffer()
        return self._advance()[0]

    def commands(self, action):
        speed, ratio, period = (float(a) for a in action)
        green = ratio * SIGNAL_CYCLE
        cmds = [SetSpeedLimit(l.id, speed) for l in self.world.network.lanes]
        cmds += [SetSignalTiming(j.traffic_light, green, SIGNAL_CYCLE - green)
                 for j in self.world.network.junctions if j.traffic_light]
        cmds += [SetSensorSampling(s, period) for s in sorted(self.world.sensors)]
        return cmds

    def step(self, action):
        """Apply ``action`` and advance one window: ``(state, reward, info)``."""
        self.applied.append(np.array(action, dtype=np.float64))
        frames = b"".join(encode_frame(self.reactor.apply(c)) for c in self.commands(action))
        for msg in FrameBuffer().feed(frames):
            apply_command(self.world, msg.body)
            self.view.record(msg.body)
        return self._advance()

    def _advance(self):
        t_start = self.world.t
        drops_before = self.broker.overflow_drops
        for _ in range(self.steps_per_window):
            t0 = self.world.t
            step(self.world)
            wire = b"".join(encode_frame(stream_data(e))
                            for e in emit_events(self.world, (t0, self.world.t)))
            for msg in self.rx.feed(wire):
                if msg.kind is MsgKind.STREAM_DATA:
                    ev = self.ep.relay(msg.body)
                    if ev is not None:
                        self.broker.enqueue(ev, self.world.t)
        for ev in self.broker.drain():
            self.repo.upsert(ev)
        report = self.broker.close_window((t_start, self.world.t))
        overflow = self.broker.overflow_drops - drops_before

        ratios, speeds = [], []
        for _, ts, attrs in self.repo.latest(EventType.E1):
            if ts <= t_start:
                continue
            v = attrs["speed_kmh"] / 3.6
            lane = self.view.lane_at(attrs["x"], attrs["y"])
            ratios.append(min(1.0, v / self.view.lane_limit[lane]))
            speeds.append(min(1.0, v / self.sim_cfg.v_max))
        congestion = 1.0 - float(np.mean(ratios)) if ratios else 0.0
        mean_speed = float(np.mean(speeds)) if speeds else 1.0
        state = np.array([report.rho[EventType.E1], report.rho[EventType.E2],
                          report.rho[EventType.E3], congestion, mean_speed])
        reward = -self.congestion_weight * congestion \
            - self.overflow_weight * overflow / self.capacity
        return state, float(reward), {"overflow": overflow, "congestion": congestion}


def make_env(sim: dict | None = None, sensors: int = 20, seed: int = 0, **kw) -> TwinEnv:
    cfg = SimConfig.from_dict(dict(sim or {}))
    cfg = replace(cfg, sensors=sensors, seed=seed)
    return TwinEnv(cfg, **kw)
