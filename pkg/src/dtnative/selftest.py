"""Property suites with independent oracles, shared by ``dtnative selftest`` and tests.

Every check pairs the implementation with a separately written reference:
a byte-level frame encoder, a brute-force event recount, a monitor over the
session machines, and central finite differences for gradients.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolViolation
from .events import (
    Event,
    EventType,
    SetSensorSampling,
    SetSignalTiming,
    SetSpeedLimit,
)
from .pipeline import BrokerState
from .wire import (
    ACK,
    AWAKE,
    FIN,
    NOTF,
    SUSPEND,
    SYN,
    SYN_ACK,
    EventReady,
    Message,
    MsgKind,
    NeedMoreData,
    Received,
    SessionState,
    Start,
    Stop,
    StreamFlagReset,
    StreamFlagSet,
    Tick,
    client_step,
    decode_frame,
    encode_frame,
    feedback,
    server_step,
    stream_data,
)

# --- frames ------------------------------------------------------------------

REFERENCE_TAGS = {"Syn": 1, "SynAck": 2, "Ack": 3, "Notf": 4, "StreamData": 5,
                  "Awake": 6, "Feedback": 7, "Fin": 8, "Suspend": 9}
_NAMES = {MsgKind.SYN: "Syn", MsgKind.SYN_ACK: "SynAck", MsgKind.ACK: "Ack",
          MsgKind.NOTF: "Notf", MsgKind.STREAM_DATA: "StreamData", MsgKind.AWAKE: "Awake",
          MsgKind.FEEDBACK: "Feedback", MsgKind.FIN: "Fin", MsgKind.SUSPEND: "Suspend"}


def reference_payload(msg: Message) -> bytes:
    body = msg.body
    if body is None:
        return b""
    if isinstance(body, Event):
        d = {"type": body.type.value, "id": body.entity_id, "loc": [body.x, body.y],
             "t": [body.t_start, body.t_end]}
        if body.type is EventType.E1:
            d["speed"] = body.speed
        else:
            d["lane"] = body.lane
        if body.type is EventType.E3:
            d["rate"] = body.duration_rate
    elif isinstance(body, SetSpeedLimit):
        d = {"cmd": "SetSpeedLimit", "lane": body.lane, "limit": body.limit}
    elif isinstance(body, SetSignalTiming):
        d = {"cmd": "SetSignalTiming", "light": body.light, "green": body.green, "red": body.red}
    else:
        d = {"cmd": "SetSensorSampling", "sensor": body.sensor, "period": body.period}
    return json.dumps(d, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def reference_encode(msg: Message) -> bytes:
    payload = reference_payload(msg)
    n = 1 + len(payload)
    header = bytes([(n >> 24) & 0xFF, (n >> 16) & 0xFF, (n >> 8) & 0xFF, n & 0xFF])
    return header + bytes([REFERENCE_TAGS[_NAMES[msg.kind]]]) + payload


_ID_CHARS = string.ascii_letters + string.digits + "_-é中 \"\\<&"


def _rand_id(rng):
    return "".join(rng.choice(list(_ID_CHARS), size=int(rng.integers(1, 12))))


def _rand_float(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def random_event(rng) -> Event:
    et = EventType(("E1", "E2", "E3")[int(rng.integers(3))])
    t0 = _rand_float(rng, 0, 1e4)
    t1 = t0 + _rand_float(rng, 0, 60)
    x, y = _rand_float(rng, -1e3, 1e3), _rand_float(rng, -1e3, 1e3)
    if et is EventType.E1:
        return Event(et, _rand_id(rng), x, y, t0, t1, speed=_rand_float(rng, 0, 13.89))
    if et is EventType.E2:
        return Event(et, _rand_id(rng), x, y, t0, t1, lane=_rand_id(rng))
    rate = min(max(_rand_float(rng, 0, 1), 1e-9), 1 - 1e-9)
    return Event(et, _rand_id(rng), x, y, t0, t1, lane=_rand_id(rng), duration_rate=rate)


def random_command(rng):
    k = int(rng.integers(3))
    if k == 0:
        return SetSpeedLimit(_rand_id(rng), _rand_float(rng, 5.0, 13.89))
    if k == 1:
        red = _rand_float(rng, 5, 60)
        ratio = _rand_float(rng, 0.2, 0.8)
        green = red * ratio / (1 - ratio)
        return SetSignalTiming(_rand_id(rng), green, red)
    return SetSensorSampling(_rand_id(rng), _rand_float(rng, 1, 30))


CONTROL = (SYN, SYN_ACK, ACK, NOTF, AWAKE, FIN, SUSPEND)


def random_message(rng) -> Message:
    k = int(rng.integers(9))
    if k < 7:
        return CONTROL[k]
    if k == 7:
        return stream_data(random_event(rng))
    return feedback(random_command(rng))


def frame_fuzz(n: int = 100_000, seed: int = 0) -> list:
    """Failures (index, reason) over ``n`` random messages; empty means pass."""
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(n):
        m = random_message(rng)
        tail = bytes(rng.integers(0, 256, size=int(rng.integers(0, 6)), dtype=np.uint8))
        try:
            b = encode_frame(m)
            if b != reference_encode(m):
                failures.append((i, "bytes differ from reference encoder"))
                continue
            got = decode_frame(b + tail)
            if got is NeedMoreData or got[0] != m or got[1] != tail:
                failures.append((i, "roundtrip mismatch"))
                continue
            cut = int(rng.integers(0, len(b)))
            if decode_frame(b[:cut]) is not NeedMoreData:
                failures.append((i, "partial frame not reported as NeedMoreData"))
        except Exception as exc:  # any raise is a fuzz failure
            failures.append((i, f"{type(exc).__name__}: {exc}"))
    return failures


# --- density -----------------------------------------------------------------

def _brute_density(log, window_lo, window_hi, event_type, capacity):
    count = 0
    for k in range(window_lo, window_hi):
        if log[k] == event_type:
            count += 1
    return min(1.0, count / capacity)


def density_oracle(n_streams: int = 1000, seed: int = 0) -> list:
    """Mismatches between broker densities and a recount of the raw event log."""
    rng = np.random.default_rng(seed)
    types = (EventType.E1, EventType.E2, EventType.E3)
    mismatches = []
    for s in range(n_streams):
        caps = {t: int(rng.integers(1, 80)) for t in types}
        broker = BrokerState(caps)
        n = int(rng.integers(0, 400))
        kinds = rng.integers(0, 3, size=n)
        cuts = sorted(set(int(c) for c in rng.integers(0, n + 1, size=int(rng.integers(0, 8)))))
        drains = set(int(c) for c in rng.integers(0, n + 1, size=int(rng.integers(0, 5))))
        raw, lo = [], 0
        for k in range(n + 1):
            if k in drains:
                broker.drain()
            if k in cuts or k == n:
                for t in types:
                    want = _brute_density(raw, lo, k, t, caps[t])
                    got = broker.density(t)
                    if got != want:
                        mismatches.append((s, k, t.value, got, want))
                broker.close_window((lo, k))
                lo = k
            if k == n:
                break
            t = types[int(kinds[k])]
            raw.append(t)
            ev = (Event(t, "v", 0.0, 0.0, 0.0, 1.0, speed=1.0) if t is EventType.E1 else
                  Event(t, "s", 0.0, 0.0, 0.0, 1.0, lane="L") if t is EventType.E2 else
                  Event(t, "l", 0.0, 0.0, 0.0, 1.0, lane="L", duration_rate=0.5))
            broker.enqueue(ev, float(k))
    return mismatches


# --- session state machines --------------------------------------------------

_EV = Event(EventType.E1, "v000001", 0.0, 0.0, 0.0, 10.0, speed=5.0)
_CMD = SetSpeedLimit("E0_0", 8.33)
_INBOUND = (SYN, SYN_ACK, ACK, NOTF, stream_data(_EV), AWAKE, feedback(_CMD), FIN, SUSPEND)
CLIENT_INPUTS = (Start(), Tick(), Stop()) + tuple(Received(m) for m in _INBOUND)
SERVER_INPUTS = (StreamFlagSet(), StreamFlagReset(), EventReady(_EV), Stop()) + \
    tuple(Received(m) for m in _INBOUND)


@dataclass
class EnumerationResult:
    sequences: int  # input sequences of length 1..depth explored (violations end a sequence)
    violations: list  # safety property failures


def _enumerate(step_fn, init, inputs, depth, monitor):
    """Exhaustive DFS; memoized on (state, monitor) since the step functions are pure."""
    memo = {}
    failures = []

    def go(state, mon, remaining):
        key = (state, mon, remaining)
        if key in memo:
            return memo[key]
        total = 0
        for inp in inputs:
            total += 1
            try:
                new_state, out = step_fn(state, inp)
            except ProtocolViolation:
                continue
            new_mon, problem = monitor(state, mon, inp, new_state, out)
            if problem:
                failures.append((state, inp, problem))
                continue
            if remaining > 1:
                total += go(new_state, new_mon, remaining - 1)
        memo[key] = total
        return total

    n = go(init, (False, False), depth)
    return EnumerationResult(n, failures)


def _server_monitor(state, mon, inp, new_state, out):
    notf_seen, fin_seen = mon
    if fin_seen and out:
        return mon, "output after Fin"
    if any(m.kind is MsgKind.STREAM_DATA for m in out) and not notf_seen:
        return mon, "StreamData emitted before Notf received"
    if isinstance(inp, Received):
        if inp.msg.kind is MsgKind.NOTF:
            notf_seen = True
        if inp.msg.kind is MsgKind.FIN:
            fin_seen = True
    if any(m.kind is MsgKind.FIN for m in out):
        fin_seen = True
    return (notf_seen, fin_seen), None


def _client_monitor(state, mon, inp, new_state, out):
    notf_sent, fin_seen = mon
    if fin_seen and out:
        return mon, "output after Fin"
    if (isinstance(inp, Received) and inp.msg.kind is MsgKind.STREAM_DATA
            and not notf_sent and not new_state.finished):
        return mon, "StreamData accepted before Notf sent"
    if any(m.kind is MsgKind.NOTF for m in out):
        notf_sent = True
    if (isinstance(inp, Received) and inp.msg.kind is MsgKind.FIN) or \
            any(m.kind is MsgKind.FIN for m in out):
        fin_seen = True
    return (notf_sent, fin_seen), None


def enumerate_server(depth: int = 8) -> EnumerationResult:
    return _enumerate(server_step, SessionState.server(), SERVER_INPUTS, depth, _server_monitor)


def enumerate_client(depth: int = 8) -> EnumerationResult:
    return _enumerate(client_step, SessionState.client(), CLIENT_INPUTS, depth, _client_monitor)


def enumerate_recovery(depth: int = 8, recovery: float = 2.0) -> EnumerationResult:
    """Fault/tick/advance sequences: exactly one Awake per fault cycle, at the first
    tick with ``now >= until``, and none otherwise."""
    actions = ("fault", "tick", "adv1", "adv_rec")
    failures = []
    count = 0

    def go(until, now, awakes_in_cycle, seq):
        nonlocal count
        for a in actions:
            count += 1
            b = BrokerState(1, recovery_period=recovery)
            b.recovering_until = until
            b.stream_enabled = until is None
            n_now, n_until, n_aw = now, until, awakes_in_cycle
            if a == "fault":
                b.on_fault(now)
                n_until, n_aw = b.recovering_until, 0
                if b.stream_enabled or n_until != now + recovery:
                    failures.append((seq + (a,), "fault did not enter recovery"))
                    continue
            elif a == "tick":
                msg = b.tick_recovery(now)
                expect = until is not None and now >= until
                if (msg == AWAKE) != expect:
                    failures.append((seq + (a,), f"awake={msg is not None} expected={expect}"))
                    continue
                if msg is not None:
                    n_aw += 1
                    n_until = None
                    if n_aw != 1:
                        failures.append((seq + (a,), "second Awake in one fault cycle"))
                        continue
            elif a == "adv1":
                n_now = now + 1.0
            else:
                n_now = now + recovery
            if len(seq) + 1 < depth:
                go(n_until, n_now, n_aw, seq + (a,))

    go(None, 0.0, 0, ())
    return EnumerationResult(count, failures)


# --- gradients ---------------------------------------------------------------

def rel_err(a, b, floor=1e-7):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grads(f, params, h=1e-5, coords=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. arrays mutated in place.

    ``coords`` limits each array to that many random entries (None: all).
    Returns a list of (array index, flat indices, numeric values).
    """
    out = []
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if coords is None or coords >= flat.size else \
            rng.choice(flat.size, size=coords, replace=False)
        vals = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = f()
            flat[k] = orig - h
            fm = f()
            flat[k] = orig
            vals[j] = (fp - fm) / (2 * h)
        out.append((pi, idx, vals))
    return out


def gradient_checks(n: int = 100, seed: int = 0, tol: float = 1e-4) -> list:
    """``n`` randomized finite-difference checks, alternating critic loss and actor
    objective; returns the failing (check, kind, worst relative error)."""
    from .learner.ddpg import (
        Batch,
        DdpgNets,
        actor_objective_and_grads,
        critic_loss_and_grads,
        to_action,
        to_normalized,
    )
    from .learner.mlp import Mlp

    rng = np.random.default_rng(seed)
    failures = []
    for i in range(n):
        hidden = int(rng.integers(2, 9)) if i % 10 else 64
        state_dim = 5
        actor = Mlp.init([state_dim, hidden, hidden, 3], ["relu", "relu", "tanh"], rng)
        critic = Mlp.init([state_dim + 3, hidden, hidden, 1], ["relu", "relu", "identity"], rng)
        nets = DdpgNets(actor, critic)
        m = int(rng.integers(1, 9))
        s = rng.uniform(0, 1, (m, state_dim))
        a = to_action(rng.uniform(-1, 1, (m, 3)))
        b = Batch(s, a, rng.normal(size=m), rng.uniform(0, 1, (m, state_dim)),
                  (rng.uniform(size=m) < 0.2).astype(float))
        coords = None if hidden < 64 else 25
        if i % 2 == 0:
            y = rng.normal(size=m)
            _, grads = critic_loss_and_grads(b, nets, y)
            x = np.hstack([b.s, to_normalized(b.a)])

            def f():
                q = critic.forward(x)[:, 0]
                return float(np.mean((y - q) ** 2))
            params, kind = critic.params(), "critic"
        else:
            _, grads = actor_objective_and_grads(b, nets)

            def f():
                u = actor.forward(b.s)
                return -float(np.mean(critic.forward(np.hstack([b.s, u]))[:, 0]))
            params, kind = actor.params(), "actor"
        worst = 0.0
        for pi, idx, vals in numeric_grads(f, params, coords=coords, rng=rng):
            worst = max(worst, rel_err(grads[pi].reshape(-1)[idx], vals))
        if not worst <= tol:
            failures.append((i, kind, worst))
    return failures


def run_all(quick: bool = False, echo=print) -> bool:
    """Run every suite, echo one line each, return overall pass."""
    n_frames = 10_000 if quick else 100_000
    results = []
    f = frame_fuzz(n_frames)
    results.append((f"frame roundtrip fuzz ({n_frames} frames)", not f, f"{len(f)} failures"))
    srv, cli = enumerate_server(8), enumerate_client(8)
    rec = enumerate_recovery(8)
    results.append(("server state machine, sequences <= 8", not srv.violations,
                    f"{srv.sequences} sequences, {len(srv.violations)} violations"))
    results.append(("client state machine, sequences <= 8", not cli.violations,
                    f"{cli.sequences} sequences, {len(cli.violations)} violations"))
    results.append(("one Awake per fault cycle, sequences <= 8", not rec.violations,
                    f"{rec.sequences} sequences, {len(rec.violations)} violations"))
    d = density_oracle(100 if quick else 1000)
    results.append(("density equals brute-force recount", not d, f"{len(d)} mismatches"))
    g = gradient_checks(20 if quick else 100)
    results.append(("finite-difference gradient checks", not g, f"{len(g)} failures"))
    for name, ok, detail in results:
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all(ok for _, ok, _ in results)
