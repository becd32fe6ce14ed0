import json
import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multisgraph.errors import DecodeError, MalformedPayload, PeerUnreachable, TruncatedFrame, UnsupportedVersion
from multisgraph.transport import (
    GRAPH_SHARE,
    HELLO,
    ROOM_DESC,
    BrokerMessage,
    InMemoryBus,
    LinkModel,
    SocketEndpoint,
    base_port,
    canonical_json,
    decode,
    decode_prefix,
    encode,
)


def room_desc(sender=1, seq=1, rng=None):
    rng = rng or np.random.default_rng(0)
    return BrokerMessage(
        ROOM_DESC,
        sender,
        seq,
        {
            "room_id": 3,
            "center": rng.normal(size=2).tolist(),
            "n_keyframes": 4,
            "cloud": rng.normal(size=30).tolist(),
            "n_rings": 2,
            "n_sectors": 3,
            "max_radius": 8.0,
            "matrix": rng.uniform(size=6).tolist(),
        },
    )


def test_frame_layout():
    m = BrokerMessage(HELLO, 4, 0, {"agent_id": 4})
    frame = encode(m)
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4
    body = json.loads(frame[4:])
    assert body == {"version": 1, "type": "HELLO", "sender": 4, "seq": 0, "payload": {"agent_id": 4}}
    assert frame[4:] == canonical_json(body).encode()
    assert b" " not in frame[4:]


def test_canonical_json_examples():
    assert canonical_json({"b": 1, "a": [1.0, 0.1, None, True]}) == '{"a":[1.0,0.1,null,true],"b":1}'
    assert canonical_json(np.float64(1e-20)) == "1e-20"
    with pytest.raises(ValueError):
        canonical_json(float("nan"))


def test_encoding_is_deterministic():
    a = encode(room_desc())
    b = encode(room_desc())
    assert a == b
    # key insertion order does not matter
    m = room_desc()
    shuffled = BrokerMessage(m.type, m.sender, m.seq, dict(reversed(list(m.payload.items()))))
    assert encode(shuffled) == a


def test_round_trip_randomized():
    rng = np.random.default_rng(1)
    for i in range(1000):
        m = room_desc(int(rng.integers(0, 50)), i, rng)
        got = decode(encode(m))
        assert got == m


finite = st.floats(allow_nan=False, allow_infinity=False)
json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**53), 2**53) | finite | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=6), inner, max_size=4),
    max_leaves=20,
)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.text(max_size=6), json_values, max_size=5), st.integers(0, 2**31), st.integers(0, 2**31))
def test_ack_round_trip_any_payload(payload, sender, seq):
    m = BrokerMessage("ACK", sender, seq, payload)
    assert decode(encode(m)) == m


def test_float_bits_survive():
    xs = [0.1, 1 / 3, 5e-324, 1.7976931348623157e308, -0.0, 2.0**-30]
    m = BrokerMessage("ACK", 1, 1, {"x": xs})
    back = decode(encode(m)).payload["x"]
    assert [struct.pack(">d", x) for x in back] == [struct.pack(">d", x) for x in xs]


def test_truncated_frames():
    frame = encode(room_desc())
    for cut in (0, 2, 4, len(frame) // 2, len(frame) - 1):
        with pytest.raises(TruncatedFrame):
            decode(frame[:cut])


def test_decode_prefix_streams():
    a, b = encode(room_desc(seq=1)), encode(room_desc(seq=2))
    m, used = decode_prefix(a + b)
    assert m.seq == 1 and used == len(a)
    assert decode_prefix((a + b)[used:])[0].seq == 2
    with pytest.raises(MalformedPayload):
        decode(a + b)


def reframe(obj):
    body = json.dumps(obj).encode()
    return struct.pack(">I", len(body)) + body


def test_version_and_envelope_checks():
    env = {"version": 2, "type": "HELLO", "sender": 1, "seq": 0, "payload": {}}
    with pytest.raises(UnsupportedVersion):
        decode(reframe(env))
    for bad in (
        {**env, "version": 1, "type": "PING"},
        {**env, "version": 1, "seq": -1},
        {**env, "version": 1, "sender": "1"},
        {**env, "version": True},
        {**env, "version": 1, "payload": []},
        {k: v for k, v in env.items() if k != "seq"},
    ):
        with pytest.raises(MalformedPayload):
            decode(reframe(bad))
    with pytest.raises(MalformedPayload):
        decode(struct.pack(">I", 3) + b"NaN")


def test_payload_schema_checks():
    good = json.loads(encode(room_desc())[4:])
    bad = json.loads(json.dumps(good))
    bad["payload"]["cloud"] = bad["payload"]["cloud"][:-1]
    with pytest.raises(MalformedPayload):
        decode(reframe(bad))
    bad = json.loads(json.dumps(good))
    bad["payload"]["matrix"] = bad["payload"]["matrix"][:5]
    with pytest.raises(MalformedPayload):
        decode(reframe(bad))
    share = {"version": 1, "type": GRAPH_SHARE, "sender": 1, "seq": 2, "payload": {"rooms": [{"id": "x"}], "planes": [], "edges": []}}
    with pytest.raises(MalformedPayload):
        decode(reframe(share))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_fuzzing_raises_only_decode_errors(blob):
    try:
        decode(blob)
    except DecodeError:
        pass


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 200), st.integers(0, 255), st.data())
def test_bit_flips_raise_only_decode_errors(pos, value, data):
    frame = bytearray(encode(room_desc()))
    pos = data.draw(st.integers(0, len(frame) - 1))
    frame[pos] = value
    try:
        decode(bytes(frame))
    except DecodeError:
        pass


# -- in-memory bus ---------------------------------------------------------


def bus(link=None, agents=(1, 2, 3)):
    b = InMemoryBus(link)
    for a in agents:
        b.register(a)
    return b


def test_bus_delivers_exactly_once():
    b = bus()
    msgs = [room_desc(1, i) for i in range(20)]
    for m in msgs:
        assert b.send(m) == 2
    assert b.deliver(2) == msgs and b.deliver(3) == msgs
    assert b.deliver(1) == [] and b.deliver(2) == []
    assert b.pending() == 0
    s = b.counter.summary()[ROOM_DESC]
    assert s["messages"] == 40 and s["bytes"] == 2 * sum(len(encode(m)) for m in msgs)


def test_bus_addressing():
    b = bus()
    b.send(room_desc(1, 0), to=3)
    assert b.deliver(2) == [] and len(b.deliver(3)) == 1
    with pytest.raises(PeerUnreachable):
        b.send(room_desc(1, 0), to=9)
    with pytest.raises(PeerUnreachable):
        b.deliver(9)
    assert [b.next_seq(1) for _ in range(3)] == [0, 1, 2] and b.next_seq(2) == 0


def test_link_model_is_seeded():
    def received(seed):
        b = bus(LinkModel(drop=0.3, duplicate=0.3, reorder=True, seed=seed))
        for i in range(200):
            b.send(room_desc(1, i), to=2)
        return [m.seq for m in b.deliver(2)]

    a = received(5)
    assert a == received(5)
    assert a != received(6)
    assert len(set(a)) < 200  # some dropped
    assert len(a) > len(set(a))  # some duplicated
    assert a != sorted(a)


def test_link_probabilities_validated():
    with pytest.raises(ValueError):
        LinkModel(drop=1.5)


# -- sockets -----------------------------------------------------------------


def test_base_port_env(monkeypatch):
    monkeypatch.delenv("MSGRAPH_PORT", raising=False)
    assert base_port() == 47800
    monkeypatch.setenv("MSGRAPH_PORT", "51234")
    assert base_port() == 51234


def collect(ep, n, timeout=5.0):
    out, t0 = [], time.time()
    while len(out) < n and time.time() - t0 < timeout:
        out += ep.deliver(timeout=0.05)
    return out


def test_socket_round_trip():
    a, b = SocketEndpoint(1), SocketEndpoint(2)
    try:
        a.add_peer(2, "127.0.0.1", b.port)
        b.add_peer(1, "127.0.0.1", a.port)
        msgs = [room_desc(1, i, np.random.default_rng(i)) for i in range(50)]
        for m in msgs:
            a.send(m)
        got = collect(b, 50)
        assert got == msgs  # one connection keeps order
        b.send(BrokerMessage(HELLO, 2, 0, {"agent_id": 2}))
        assert collect(a, 1)[0].sender == 2
        assert a.counter.total() == sum(len(encode(m)) for m in msgs)
    finally:
        a.close()
        b.close()


def test_socket_unreachable_peer():
    a = SocketEndpoint(1)
    try:
        with pytest.raises(PeerUnreachable):
            a.send(room_desc(), to=7)
        probe = SocketEndpoint(9)
        port = probe.port
        probe.close()
        a.add_peer(9, "127.0.0.1", port)
        with pytest.raises(PeerUnreachable):
            a.send(room_desc(), to=9)
    finally:
        a.close()
