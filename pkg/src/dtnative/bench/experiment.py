"""One experiment run: sim server process plus the EP/EB/ER client tasks.

Processing time of an event is twin commit wall time minus server emit wall
time, plus the feedback decision duration when its window ended in a
Feedback. Latency is client receipt wall time minus emit wall time. All wall
times come from the system-wide monotonic clock, shared across processes.
"""

from __future__ import annotations

import asyncio
import contextlib
import csv
import hashlib
import math
import os
import socket
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from ..errors import IoFailure, ProtocolViolation, StaleEvent, WatchdogTimeout
from ..events import EventType, canonical_json
from ..pipeline import BrokerState, ConfigView, EventReactor, PublisherState, decide_flow
from ..sim.server import ServerProcess, SimServer
from ..sim.world import build_network
from ..twins import TwinRepository
from ..wire import (
    FrameBuffer,
    MsgKind,
    Phase,
    Received,
    SessionState,
    Start,
    Tick,
    client_step,
    encode_frame,
)
from .config import ExperimentConfig

EPS = 1e-9
RECORD_FIELDS = ("seq", "type", "id", "sim_t", "commit_sim_t", "window", "feedback",
                 "emit_wall", "recv_wall", "commit_wall", "proc_ms", "lat_ms")
SIM_FIELDS = ("seq", "type", "id", "sim_t", "commit_sim_t", "window", "feedback")

_WINDOW_END = object()
_STREAM_END = object()


class _Envelope(NamedTuple):
    event: object
    seq: int
    recv_wall: float

    @property
    def type(self):
        return self.event.type


def _p95(xs):
    if not xs:
        return math.nan
    s = sorted(xs)
    return s[min(len(s) - 1, int(math.ceil(0.95 * len(s))) - 1)]


@dataclass
class MetricsReport:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    event_log: list = field(default_factory=list)
    feedback: list = field(default_factory=list)
    drops: dict = field(default_factory=dict)
    twin_digest: str = ""
    world_digest: str = ""

    @property
    def events(self):
        return len(self.records)

    @property
    def mean_proc_ms(self):
        return statistics.fmean(r["proc_ms"] for r in self.records) if self.records else math.nan

    @property
    def mean_lat_ms(self):
        return statistics.fmean(r["lat_ms"] for r in self.records) if self.records else math.nan

    @property
    def p95_proc_ms(self):
        return _p95([r["proc_ms"] for r in self.records])

    @property
    def p95_lat_ms(self):
        return _p95([r["lat_ms"] for r in self.records])

    @property
    def feedback_count(self):
        return len(self.feedback)

    def sim_trace(self):
        return [tuple(r[k] for k in SIM_FIELDS) for r in self.records]

    def summary(self) -> str:
        c = self.config
        return (f"sensors={c.sensors} mode={c.mode} seed={c.seed} events={self.events} "
                f"mean_proc_ms={self.mean_proc_ms:.3f} p95_proc_ms={self.p95_proc_ms:.3f} "
                f"mean_lat_ms={self.mean_lat_ms:.3f} p95_lat_ms={self.p95_lat_ms:.3f} "
                f"feedback={self.feedback_count} drops={sum(self.drops.values())}")

    def write_csv(self, path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(RECORD_FIELDS)
                for r in self.records:
                    w.writerow([_cell(r[k]) for k in RECORD_FIELDS])
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics_csv(path) -> list:
    ints = {"seq", "window", "feedback"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append({k: (int(v) if k in ints else v if k in ("type", "id") else float(v))
                        for k, v in row.items()})
    return out


class _Client:
    """EP, EB and ER as three tasks joined by in-order queues."""

    def __init__(self, cfg: ExperimentConfig, sim_cfg, twin_dir):
        self.cfg = cfg
        self.dt_native = cfg.mode == "dt-native"
        self.network = build_network(sim_cfg).network
        self.view = ConfigView(self.network, sim_cfg)
        self.ep = PublisherState()
        self.broker = BrokerState(cfg.capacity, {EventType(k): v for k, v in cfg.thresholds.items()},
                                  cfg.recovery_period)
        self.reactor = EventReactor()
        self.repo = TwinRepository(twin_dir)
        self.records: dict = {}
        self.event_log: list = []
        self.feedback: list = []
        self.window_feedback_ms: dict = {}
        self.stale = 0
        self.last_commit = time.monotonic()
        cycle = cfg.eval_interval if self.dt_native else cfg.poll_interval
        self.cycle = cycle
        self.next_cycle = cycle
        self.window_index = 0

    async def run(self, host, port):
        reader, writer = await asyncio.open_connection(host, port)
        sock = writer.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        eb_in, er_in, resume = asyncio.Queue(), asyncio.Queue(), asyncio.Queue()
        tasks = [asyncio.create_task(self._publisher(reader, writer, eb_in, resume)),
                 asyncio.create_task(self._broker(eb_in, er_in, resume)),
                 asyncio.create_task(self._reactor(writer, er_in))]
        dog = asyncio.create_task(self._watchdog())
        try:
            done, _ = await asyncio.wait([tasks[1], dog], return_when=asyncio.FIRST_COMPLETED)
            for t in done:
                t.result()
            await tasks[0]
        finally:
            for t in tasks + [dog]:
                t.cancel()
            await asyncio.gather(*tasks, dog, return_exceptions=True)
            writer.close()
            try:
                await writer.wait_closed()
            except OSError:
                pass

    async def _watchdog(self):
        while True:
            await asyncio.sleep(min(1.0, self.cfg.watchdog / 4))
            if time.monotonic() - self.last_commit > self.cfg.watchdog:
                raise WatchdogTimeout(f"no twin commit for {self.cfg.watchdog} s")

    async def _publisher(self, reader, writer, eb_in, resume):
        st, out = client_step(SessionState.client(), Start())
        writer.write(b"".join(encode_frame(m, self.cfg.max_frame) for m in out))
        fb = FrameBuffer(self.cfg.max_frame)
        seq = 0
        while True:
            data = await reader.read(1 << 16)
            recv_wall = time.monotonic()
            if not data:
                if not st.finished:
                    raise ProtocolViolation(st, "connection closed before Fin")
                break
            for msg in fb.feed(data):
                st, out = client_step(st, Received(msg))
                if out:
                    writer.write(b"".join(encode_frame(m, self.cfg.max_frame) for m in out))
                if msg.kind is MsgKind.STREAM_DATA:
                    ev = self.ep.relay(msg.body)
                    if ev is not None:
                        eb_in.put_nowait((seq, ev, recv_wall))
                    seq += 1
                elif msg.kind is MsgKind.SUSPEND:
                    eb_in.put_nowait(_WINDOW_END)
                    await resume.get()
                    st, out = client_step(st, Tick())
                    writer.write(b"".join(encode_frame(m, self.cfg.max_frame) for m in out))
                elif msg.kind is MsgKind.FIN:
                    eb_in.put_nowait(_STREAM_END)
                    return
            await writer.drain()

    def _commit(self, sim_t):
        for env in self.broker.drain():
            try:
                self.repo.upsert(env.event)
            except StaleEvent:
                self.stale += 1
                continue
            self.repo.flush()
            self.records[env.seq].update(commit_wall=time.monotonic(), commit_sim_t=sim_t)
        self.last_commit = time.monotonic()

    async def _broker(self, eb_in, er_in, resume):
        cfg = self.cfg
        window_start = 0.0
        while True:
            item = await eb_in.get()
            if item is _STREAM_END:
                self._commit(window_start + cfg.window)
                return
            if item is _WINDOW_END:
                t_end = window_start + cfg.window
                while self.next_cycle <= t_end + EPS:
                    self._commit(self.next_cycle)
                    self.next_cycle += self.cycle
                if self.dt_native:
                    self._commit(t_end)
                    started = time.monotonic()
                    report = self.broker.close_window((window_start, t_end))
                    stats = self.view.stats(self.repo, window_start)
                    decision = decide_flow(self.broker, report, stats)
                    if not decision.is_forward:
                        done = asyncio.get_running_loop().create_future()
                        er_in.put_nowait((decision.command, done))
                        await done
                        self.feedback.append((t_end, decision.command))
                        self.window_feedback_ms[self.window_index] = \
                            (time.monotonic() - started) * 1e3
                else:
                    self.broker.close_window((window_start, t_end))
                window_start = t_end
                self.window_index += 1
                resume.put_nowait(None)
                continue
            seq, ev, recv_wall = item
            sim_t = ev.t_end
            while sim_t > self.next_cycle + EPS:
                self._commit(self.next_cycle)
                self.next_cycle += self.cycle
            self.records[seq] = {"seq": seq, "type": ev.type.value, "id": ev.entity_id,
                                 "sim_t": sim_t, "window": self.window_index,
                                 "recv_wall": recv_wall}
            self.event_log.append(canonical_json(ev.to_dict()))
            evicted = self.broker.enqueue(_Envelope(ev, seq, recv_wall), sim_t)
            if evicted is not None:
                self.records[evicted.seq]["evicted"] = True

    async def _reactor(self, writer, er_in):
        while True:
            cmd, done = await er_in.get()
            msg = self.reactor.apply(cmd)
            writer.write(encode_frame(msg, self.cfg.max_frame))
            await writer.drain()
            self.view.record(cmd)
            done.set_result(None)


def _twin_digest(repo: TwinRepository) -> str:
    from ..twins import serialize_twin
    h = hashlib.sha256()
    for tid in sorted(repo.twins):
        h.update(serialize_twin(repo.twins[tid]).encode())
    return h.hexdigest()


def run_experiment(cfg: ExperimentConfig, sim: Optional[dict] = None) -> MetricsReport:
    """Boot the sim server, stream ``cfg.duration`` sim seconds through the pipeline."""
    cfg.validate()
    sim_cfg = cfg.sim_config(sim)
    server = SimServer(sim_cfg, cfg.duration, cfg.window, cfg.time_scale, cfg.max_frame)
    with contextlib.ExitStack() as stack:
        if cfg.out_dir:
            twin_dir = Path(cfg.out_dir) / "twins"
        else:
            twin_dir = Path(stack.enter_context(tempfile.TemporaryDirectory(prefix="twins-", dir=_scratch_root())))
        try:
            twin_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {twin_dir}: {exc.strerror}") from None
        proc = ServerProcess(server, cfg.host, cfg.port)
        client = _Client(cfg, sim_cfg, twin_dir)
        try:
            asyncio.run(client.run(*proc.address[:2]))
        except OSError as exc:
            proc.terminate()
            raise IoFailure(f"{type(exc).__name__}: {exc}") from None
        except BaseException:
            proc.terminate()
            raise
        log = proc.result()
    if log.error:
        raise ProtocolViolation("server", log.error)
    if len(log.emit_wall) < len(client.records):
        raise ProtocolViolation("server", "emit log shorter than received stream")

    records, evicted, uncommitted = [], 0, 0
    for seq in sorted(client.records):
        r = client.records[seq]
        if r.get("evicted"):
            evicted += 1
            continue
        if "commit_wall" not in r:
            uncommitted += 1
            continue
        emit = log.emit_wall[seq]
        fb_ms = client.window_feedback_ms.get(r["window"])
        r["emit_wall"] = emit
        r["feedback"] = fb_ms is not None
        r["proc_ms"] = (r["commit_wall"] - emit) * 1e3 + (fb_ms or 0.0)
        r["lat_ms"] = (r["recv_wall"] - emit) * 1e3
        records.append({k: r[k] for k in RECORD_FIELDS})

    report = MetricsReport(
        config=cfg, records=records, event_log=client.event_log,
        feedback=client.feedback,
        drops={"publisher": client.ep.dropped, "overflow": evicted,
               "recovering": client.broker.rejected, "stale": client.stale,
               "uncommitted": uncommitted},
        twin_digest=_twin_digest(client.repo), world_digest=log.digest)
    if cfg.out_dir:
        report.write_csv(Path(cfg.out_dir) / metrics_filename(cfg))
    return report


def metrics_filename(cfg: ExperimentConfig) -> str:
    return f"metrics_{cfg.mode}_s{cfg.sensors}_seed{cfg.seed}.csv"


def _scratch_root():
    shm = Path("/dev/shm")
    return str(shm) if shm.is_dir() and os.access(shm, os.W_OK) else None
