"""Length-prefixed framing and the client/server session state machines.

Wire format::

    [u32 big-endian length][u8 tag][payload]

``length`` counts the tag byte plus the payload. StreamData and Feedback
carry canonical JSON; every other kind has an empty payload.

The step functions are pure: they take a ``SessionState`` and one input and
return the next state plus the messages to put on the wire. Callers own the
socket.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .errors import MalformedPayload, OversizeFrame, ProtocolViolation, UnknownTag
from .events import (
    Event,
    FeedbackCommand,
    canonical_json,
    command_from_dict,
    command_to_dict,
)

HEADER = struct.Struct(">I")
DEFAULT_MAX_FRAME = 64 * 1024
DEFAULT_PORT = 8813


class MsgKind(enum.IntEnum):
    SYN = 0x01
    SYN_ACK = 0x02
    ACK = 0x03
    NOTF = 0x04
    STREAM_DATA = 0x05
    AWAKE = 0x06
    FEEDBACK = 0x07
    FIN = 0x08
    # server -> client: STREAM flag was reset at a window boundary; a Notf resumes
    SUSPEND = 0x09


@dataclass(frozen=True)
class Message:
    kind: MsgKind
    body: Union[Event, FeedbackCommand, None] = None

    def __post_init__(self):
        kind = MsgKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is MsgKind.STREAM_DATA:
            if not isinstance(self.body, Event):
                raise TypeError("StreamData carries exactly one Event")
        elif kind is MsgKind.FEEDBACK:
            if isinstance(self.body, Event) or self.body is None:
                raise TypeError("Feedback carries exactly one FeedbackCommand")
        elif self.body is not None:
            raise TypeError(f"{kind.name} carries no payload")

    def __repr__(self):
        if self.body is None:
            return f"Message({self.kind.name})"
        return f"Message({self.kind.name}, {self.body!r})"


SYN = Message(MsgKind.SYN)
SYN_ACK = Message(MsgKind.SYN_ACK)
ACK = Message(MsgKind.ACK)
NOTF = Message(MsgKind.NOTF)
AWAKE = Message(MsgKind.AWAKE)
FIN = Message(MsgKind.FIN)
SUSPEND = Message(MsgKind.SUSPEND)


def stream_data(event: Event) -> Message:
    return Message(MsgKind.STREAM_DATA, event)


def feedback(cmd: FeedbackCommand) -> Message:
    return Message(MsgKind.FEEDBACK, cmd)


def _payload(msg: Message) -> bytes:
    if msg.kind is MsgKind.STREAM_DATA:
        return canonical_json(msg.body.to_dict())
    if msg.kind is MsgKind.FEEDBACK:
        return canonical_json(command_to_dict(msg.body))
    return b""


def encode_frame(msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    try:
        payload = _payload(msg)
    except UnicodeEncodeError as exc:
        raise MalformedPayload(f"payload is not encodable as UTF-8: {exc.reason}") from None
    length = 1 + len(payload)
    if length > max_frame:
        raise OversizeFrame(f"frame of {length} bytes exceeds limit {max_frame}")
    return HEADER.pack(length) + bytes((msg.kind,)) + payload


class _NeedMoreData:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NeedMoreData"

    def __bool__(self):
        return False


NeedMoreData = _NeedMoreData()


def decode_frame(buf: bytes, max_frame: int = DEFAULT_MAX_FRAME):
    """Decode one frame from the front of ``buf``.

    Returns ``(message, remaining)`` or ``NeedMoreData`` when the buffer holds
    only part of a frame.
    """
    if len(buf) < HEADER.size:
        return NeedMoreData
    (length,) = HEADER.unpack_from(buf)
    if length > max_frame:
        raise OversizeFrame(f"declared length {length} exceeds limit {max_frame}")
    if length < 1:
        raise MalformedPayload("frame length 0 has no tag byte")
    end = HEADER.size + length
    if len(buf) < end:
        return NeedMoreData
    tag = buf[HEADER.size]
    try:
        kind = MsgKind(tag)
    except ValueError:
        raise UnknownTag(f"unknown tag 0x{tag:02x}") from None
    payload = bytes(buf[HEADER.size + 1:end])
    if kind is MsgKind.STREAM_DATA:
        msg = Message(kind, Event.from_dict(_parse_json(payload)))
    elif kind is MsgKind.FEEDBACK:
        msg = Message(kind, command_from_dict(_parse_json(payload)))
    else:
        if payload:
            raise MalformedPayload(f"{kind.name} must have an empty payload")
        msg = Message(kind)
    return msg, bytes(buf[end:])


def _parse_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedPayload(f"payload is not UTF-8 JSON: {exc}") from None


class FrameBuffer:
    """Accumulates stream bytes and yields complete messages."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = b""

    def feed(self, data: bytes):
        self._buf += data
        out = []
        while True:
            res = decode_frame(self._buf, self.max_frame)
            if res is NeedMoreData:
                return out
            msg, self._buf = res
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


# --- session state machines ---------------------------------------------------

class Phase(enum.Enum):
    CLOSED = "Closed"
    SYN_SENT = "SynSent"
    SYN_RECEIVED = "SynReceived"
    CONNECTED = "Connected"
    STREAMING = "Streaming"
    CLOSING = "Closing"


class Role(enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"


@dataclass(frozen=True)
class SessionState:
    phase: Phase
    role: Role
    # set once a Fin has been seen or sent; nothing is ever emitted afterwards
    finished: bool = False

    @classmethod
    def client(cls):
        return cls(Phase.CLOSED, Role.CLIENT)

    @classmethod
    def server(cls):
        return cls(Phase.CLOSED, Role.SERVER)

    def to(self, phase: Phase, finished: Optional[bool] = None) -> "SessionState":
        return SessionState(phase, self.role, self.finished if finished is None else finished)


# inputs
@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Tick:
    pass


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Received:
    msg: Message


@dataclass(frozen=True)
class StreamFlagSet:
    pass


@dataclass(frozen=True)
class StreamFlagReset:
    pass


@dataclass(frozen=True)
class EventReady:
    event: Event


def _close_on_fin(state: SessionState, inp):
    if isinstance(inp, Received) and inp.msg.kind is MsgKind.FIN:
        return state.to(Phase.CLOSED, finished=True), []
    if isinstance(inp, Stop):
        if state.finished or state.phase is Phase.CLOSED:
            return state, []
        return state.to(Phase.CLOSING, finished=True), [FIN]
    if state.finished:
        # draining after teardown: inbound frames are discarded, nothing emitted
        if isinstance(inp, Received) or not isinstance(inp, Start):
            return state, []
        raise ProtocolViolation(state, inp)
    return None


def client_step(state: SessionState, inp):
    """Client transition table.

    Closed+Start -> SynSent [Syn]; SynSent+SynAck -> Streaming [Ack, Notf];
    Streaming+StreamData -> Streaming; Streaming+Suspend -> Connected;
    Connected+Tick -> Streaming [Notf]; any+Fin -> Closed; Stop -> Closing [Fin].
    Tick elsewhere is a no-op timer input.
    """
    if state.role is not Role.CLIENT:
        raise ValueError("client_step needs a client session")
    done = _close_on_fin(state, inp)
    if done is not None:
        return done
    p = state.phase
    if isinstance(inp, Start):
        if p is Phase.CLOSED:
            return state.to(Phase.SYN_SENT), [SYN]
        raise ProtocolViolation(state, inp)
    if isinstance(inp, Tick):
        if p is Phase.CONNECTED:
            return state.to(Phase.STREAMING), [NOTF]
        return state, []
    if isinstance(inp, Received):
        k = inp.msg.kind
        if p is Phase.SYN_SENT and k is MsgKind.SYN_ACK:
            return state.to(Phase.STREAMING), [ACK, NOTF]
        if p is Phase.STREAMING and k is MsgKind.STREAM_DATA:
            return state, []
        if p is Phase.STREAMING and k is MsgKind.SUSPEND:
            return state.to(Phase.CONNECTED), []
    raise ProtocolViolation(state, inp)


def server_step(state: SessionState, inp):
    """Server transition table.

    Closed+Syn -> SynReceived [SynAck]; SynReceived+Ack -> Connected;
    Connected+Notf -> Streaming; Streaming+EventReady(e) -> [StreamData(e)];
    Streaming+StreamFlagReset -> Connected [Suspend]; Feedback is accepted in
    Connected and Streaming; any+Fin -> Closed; Stop -> Closing [Fin].
    EventReady outside Streaming is withheld (no output).
    """
    if state.role is not Role.SERVER:
        raise ValueError("server_step needs a server session")
    done = _close_on_fin(state, inp)
    if done is not None:
        return done
    p = state.phase
    if isinstance(inp, EventReady):
        if p is Phase.STREAMING:
            return state, [stream_data(inp.event)]
        return state, []
    if isinstance(inp, StreamFlagReset):
        if p is Phase.STREAMING:
            return state.to(Phase.CONNECTED), [SUSPEND]
        return state, []
    if isinstance(inp, StreamFlagSet):
        # the flag is only ever raised by an observed Notf; a local request is a no-op
        return state, []
    if isinstance(inp, Received):
        k = inp.msg.kind
        if p is Phase.CLOSED and k is MsgKind.SYN:
            return state.to(Phase.SYN_RECEIVED), [SYN_ACK]
        if p is Phase.SYN_RECEIVED and k is MsgKind.ACK:
            return state.to(Phase.CONNECTED), []
        if p is Phase.CONNECTED and k is MsgKind.NOTF:
            return state.to(Phase.STREAMING), []
        if p in (Phase.CONNECTED, Phase.STREAMING) and k is MsgKind.FEEDBACK:
            return state, []
    raise ProtocolViolation(state, inp)
