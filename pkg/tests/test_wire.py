import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnative.errors import InvalidCommand, MalformedPayload, OversizeFrame, ProtocolViolation, UnknownTag
from dtnative.events import Event, EventType, SetSignalTiming, SetSpeedLimit
from dtnative.selftest import (
    CLIENT_INPUTS,
    SERVER_INPUTS,
    enumerate_client,
    enumerate_server,
    reference_encode,
)
from dtnative.wire import (
    ACK,
    AWAKE,
    FIN,
    NOTF,
    SUSPEND,
    SYN,
    SYN_ACK,
    EventReady,
    FrameBuffer,
    Message,
    MsgKind,
    NeedMoreData,
    Phase,
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

EV = Event(EventType.E2, "S003", 12.5, 400.0, 10.0, 20.0, lane="E0_1")
E1 = Event(EventType.E1, "v000007", 1.0, 2.0, 0.0, 10.0, speed=13.89)
E3 = Event(EventType.E3, "TL_0_0", 200.0, 0.0, 0.0, 30.0, lane="E0_1", duration_rate=0.5)
CMD = SetSpeedLimit("E0_1", 8.33)
ALL = [SYN, SYN_ACK, ACK, NOTF, AWAKE, FIN, SUSPEND, stream_data(EV), stream_data(E1),
       stream_data(E3), feedback(CMD), feedback(SetSignalTiming("TL_0_0", 40.0, 20.0))]


def test_syn_bytes_match_layout_table():
    assert encode_frame(SYN) == bytes([0x00, 0x00, 0x00, 0x01, 0x01])


@pytest.mark.parametrize("msg", ALL, ids=lambda m: m.kind.name)
def test_encoder_matches_reference_and_roundtrips(msg):
    b = encode_frame(msg)
    assert b == reference_encode(msg)
    assert decode_frame(b) == (msg, b"")


def test_tags_are_the_fixed_table():
    assert [int(k) for k in (MsgKind.SYN, MsgKind.SYN_ACK, MsgKind.ACK, MsgKind.NOTF,
                             MsgKind.STREAM_DATA, MsgKind.AWAKE, MsgKind.FEEDBACK,
                             MsgKind.FIN)] == list(range(1, 9))


def test_stream_data_length_field():
    b = encode_frame(stream_data(EV))
    payload = json.dumps(EV.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    assert int.from_bytes(b[:4], "big") == 1 + len(payload)
    assert b[5:] == payload


def test_partial_header_needs_more_data():
    assert decode_frame(b"\x00\x00\x00") is NeedMoreData
    assert not NeedMoreData


def test_partial_body_needs_more_data():
    b = encode_frame(stream_data(EV))
    assert decode_frame(b[:-1]) is NeedMoreData


def test_two_frames_consume_one():
    msg, rest = decode_frame(encode_frame(SYN) * 2)
    assert msg == SYN and rest == encode_frame(SYN)


def test_unknown_tag():
    with pytest.raises(UnknownTag):
        decode_frame(b"\x00\x00\x00\x01\xff")


def test_oversize_rejected_both_ways():
    with pytest.raises(OversizeFrame):
        decode_frame(b"\x00\x01\x00\x01\x05", max_frame=1024)
    big = Event(EventType.E2, "x" * 2000, 0.0, 0.0, 0.0, 1.0, lane="L")
    with pytest.raises(OversizeFrame):
        encode_frame(stream_data(big), max_frame=1024)


@pytest.mark.parametrize("payload", [
    b"{}", b"not json", b'{"type":"E1"}', b'{"type":"E9","id":"a"}',
    b'{"id":"a","loc":[0,0],"speed":1,"t":[0,1],"type":"E1","lane":"x"}',
    b'{"id":"a","loc":[0,0],"speed":"fast","t":[0,1],"type":"E1"}',
    b'{"id":"a","loc":[0,0],"speed":1,"t":[2,1],"type":"E1"}',
    b"\xff\xfe",
])
def test_malformed_stream_payload(payload):
    frame = (1 + len(payload)).to_bytes(4, "big") + b"\x05" + payload
    with pytest.raises(MalformedPayload):
        decode_frame(frame)


def test_control_with_payload_is_malformed():
    with pytest.raises(MalformedPayload):
        decode_frame(b"\x00\x00\x00\x02\x01x")


def test_zero_length_frame_is_malformed():
    with pytest.raises(MalformedPayload):
        decode_frame(b"\x00\x00\x00\x00")


def test_feedback_range_is_left_to_the_reactor():
    payload = b'{"cmd":"SetSpeedLimit","lane":"L","limit":99}'
    msg, _ = decode_frame((1 + len(payload)).to_bytes(4, "big") + b"\x07" + payload)
    with pytest.raises(InvalidCommand):
        msg.body.validate()


def test_feedback_missing_key_is_malformed():
    payload = b'{"cmd":"SetSpeedLimit","lane":"L"}'
    with pytest.raises(MalformedPayload):
        decode_frame((1 + len(payload)).to_bytes(4, "big") + b"\x07" + payload)


def test_frame_buffer_reassembles_byte_by_byte():
    stream = b"".join(encode_frame(m) for m in ALL)
    fb = FrameBuffer()
    got = []
    for i in range(len(stream)):
        got += fb.feed(stream[i:i + 1])
    assert got == ALL and fb.pending == 0


def test_message_rejects_wrong_body():
    with pytest.raises((TypeError, ValueError)):
        Message(MsgKind.SYN, EV)
    with pytest.raises((TypeError, ValueError)):
        Message(MsgKind.STREAM_DATA, None)


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_decode_never_panics(buf):
    try:
        out = decode_frame(buf)
    except (UnknownTag, MalformedPayload, OversizeFrame):
        return
    assert out is NeedMoreData or (isinstance(out[0], Message) and len(out[1]) < len(buf))


# --- state machines ------------------------------------------------------------

def test_client_examples():
    c = SessionState.client()
    c1, out = client_step(c, Start())
    assert c1.phase is Phase.SYN_SENT and out == [SYN]
    c2, out = client_step(c1, Received(SYN_ACK))
    assert c2.phase is Phase.STREAMING and out == [ACK, NOTF]
    with pytest.raises(ProtocolViolation):
        client_step(c2, Received(SYN))
    c3, out = client_step(c2, Received(stream_data(EV)))
    assert c3 == c2 and out == []
    c4, out = client_step(c2, Received(FIN))
    assert c4.phase is Phase.CLOSED and out == []


def test_server_examples():
    s = SessionState.server()
    s1, out = server_step(s, Received(SYN))
    assert s1.phase is Phase.SYN_RECEIVED and out == [SYN_ACK]
    s2, out = server_step(s1, Received(ACK))
    assert s2.phase is Phase.CONNECTED and out == []
    assert server_step(s2, EventReady(EV)) == (s2, [])
    s3, out = server_step(s2, Received(NOTF))
    assert s3.phase is Phase.STREAMING and out == []
    assert server_step(s3, EventReady(EV)) == (s3, [stream_data(EV)])
    s4, out = server_step(s3, StreamFlagReset())
    assert s4.phase is Phase.CONNECTED and out == [SUSPEND]


def test_notf_reentry_resumes_streaming():
    s = SessionState.server().to(Phase.CONNECTED)
    s, _ = server_step(s, Received(NOTF))
    s, _ = server_step(s, StreamFlagReset())
    s, _ = server_step(s, Received(NOTF))
    assert s.phase is Phase.STREAMING
    c = SessionState.client().to(Phase.STREAMING)
    c, _ = client_step(c, Received(SUSPEND))
    c, out = client_step(c, Tick())
    assert c.phase is Phase.STREAMING and out == [NOTF]


def test_stream_flag_set_never_starts_streaming():
    s = SessionState.server().to(Phase.CONNECTED)
    assert server_step(s, StreamFlagSet()) == (s, [])


def test_stop_sends_fin_once():
    s = SessionState.server().to(Phase.STREAMING)
    s, out = server_step(s, Stop())
    assert out == [FIN] and s.phase is Phase.CLOSING
    assert server_step(s, Stop())[1] == []
    assert server_step(s, EventReady(EV))[1] == []


def test_steps_are_pure():
    for step, init, inputs in ((client_step, SessionState.client(), CLIENT_INPUTS),
                               (server_step, SessionState.server(), SERVER_INPUTS)):
        for inp in inputs:
            try:
                a = step(init, inp)
            except ProtocolViolation:
                with pytest.raises(ProtocolViolation):
                    step(init, inp)
                continue
            assert step(init, inp) == a


def test_exhaustive_enumeration_depth_6():
    srv, cli = enumerate_server(6), enumerate_client(6)
    assert srv.violations == [] and cli.violations == []
    assert srv.sequences > 10_000 and cli.sequences > 10_000


def test_server_rejects_stream_data_input():
    with pytest.raises(ProtocolViolation):
        server_step(SessionState.server().to(Phase.STREAMING), Received(stream_data(EV)))
