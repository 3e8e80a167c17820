"""TraCI-like TCP endpoint in front of a :class:`World`.

One session per listening socket. The server streams every event of a
window, suspends streaming at the window boundary, applies any Feedback
received, and resumes on the client's Notf. Wall-clock pacing maps one sim
second to ``time_scale`` wall seconds.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import socket
import time
from dataclasses import dataclass, field

from ..errors import BindFailure, FrameError, ProtocolViolation, UnknownEntity
from ..events import command_to_dict
from ..wire import (
    DEFAULT_MAX_FRAME,
    EventReady,
    FrameBuffer,
    MsgKind,
    Phase,
    Received,
    SessionState,
    Stop,
    StreamFlagReset,
    encode_frame,
    server_step,
)
from .world import SimConfig, apply_command, build_network, emit_events, step


@dataclass
class ServeLog:
    """What the server saw; shipped back to the orchestrating process."""
    emit_wall: list = field(default_factory=list)
    feedback: list = field(default_factory=list)  # (sim_t, command dict, applied)
    digest: str = ""
    sim_t: float = 0.0
    error: str = ""


class SimServer:
    def __init__(self, cfg: SimConfig, duration: float, window: float = 10.0,
                 time_scale: float = 0.0, max_frame: int = DEFAULT_MAX_FRAME):
        cfg.validate()
        self.cfg = cfg
        self.duration = duration
        self.window = window
        self.time_scale = time_scale
        self.max_frame = max_frame
        self.steps_per_window = max(1, int(round(window / cfg.dt)))
        self.n_windows = max(1, int(math.ceil(duration / window - 1e-9)))

    def serve(self, conn: socket.socket) -> ServeLog:
        log = ServeLog()
        world = build_network(self.cfg)
        fb = FrameBuffer(self.max_frame)
        inbox: list = []
        st = SessionState.server()

        def send(msgs):
            if msgs:
                conn.sendall(b"".join(encode_frame(m, self.max_frame) for m in msgs))

        def next_msg():
            while not inbox:
                data = conn.recv(65536)
                if not data:
                    raise ConnectionError("peer closed the connection")
                inbox.extend(fb.feed(data))
            return inbox.pop(0)

        def until_streaming():
            nonlocal st
            while st.phase is not Phase.STREAMING:
                msg = next_msg()
                st, out = server_step(st, Received(msg))
                send(out)
                if st.finished:
                    return False
                if msg.kind is MsgKind.FEEDBACK:
                    try:
                        apply_command(world, msg.body)
                        log.feedback.append((world.t, command_to_dict(msg.body), True))
                    except UnknownEntity:
                        log.feedback.append((world.t, command_to_dict(msg.body), False))
            return True

        try:
            if not until_streaming():
                return log
            dt = self.cfg.dt
            for w in range(self.n_windows):
                anchor_wall, anchor_sim = time.monotonic(), world.t
                for _ in range(self.steps_per_window):
                    if self.time_scale > 0:
                        target = anchor_wall + (world.t + dt - anchor_sim) * self.time_scale
                        delay = target - time.monotonic()
                        if delay > 0:
                            time.sleep(delay)
                    emit_wall = time.monotonic()
                    t0 = world.t
                    step(world)
                    out = []
                    for ev in emit_events(world, (t0, world.t)):
                        st, msgs = server_step(st, EventReady(ev))
                        out.extend(msgs)
                    log.emit_wall.extend([emit_wall] * len(out))
                    send(out)
                if w + 1 == self.n_windows:
                    break
                st, out = server_step(st, StreamFlagReset())
                send(out)
                if not until_streaming():
                    break
            st, out = server_step(st, Stop())
            send(out)
        except (ProtocolViolation, FrameError, ConnectionError, OSError) as exc:
            log.error = f"{type(exc).__name__}: {exc}"
        finally:
            log.digest = world.digest()
            log.sim_t = world.t
        return log


def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(1)
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from None
    return sock


def _serve_child(server: SimServer, lsock: socket.socket, out):
    try:
        conn, _ = lsock.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with conn:
            log = server.serve(conn)
    except Exception as exc:  # reported to the parent, never swallowed
        log = ServeLog(error=f"{type(exc).__name__}: {exc}")
    finally:
        lsock.close()
    out.send(log)
    out.close()


class ServerProcess:
    """Sim server in a forked process; ``result()`` returns its :class:`ServeLog`."""

    def __init__(self, server: SimServer, host: str = "127.0.0.1", port: int = 0):
        self.lsock = listen(host, port)
        self.address = self.lsock.getsockname()
        ctx = mp.get_context("fork")
        self._recv, send = ctx.Pipe(duplex=False)
        self.proc = ctx.Process(target=_serve_child, args=(server, self.lsock, send), daemon=True)
        self.proc.start()
        send.close()
        self.lsock.close()

    def result(self, timeout: float = 30.0) -> ServeLog:
        if not self._recv.poll(timeout):
            self.terminate()
            return ServeLog(error="server did not report")
        log = self._recv.recv()
        self.proc.join(timeout)
        return log

    def terminate(self):
        if self.proc.is_alive():
            self.proc.terminate()
        self.proc.join(1.0)
