"""Length-prefixed canonical JSON framing, an in-memory bus and a TCP endpoint."""

from __future__ import annotations

import json
import math
import os
import queue
import socket
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import MalformedPayload, PeerUnreachable, TruncatedFrame, UnsupportedVersion

VERSION = 1
HELLO, ROOM_DESC, GRAPH_SHARE, ACK = "HELLO", "ROOM_DESC", "GRAPH_SHARE", "ACK"
MESSAGE_TYPES = (HELLO, ROOM_DESC, GRAPH_SHARE, ACK)
_HEADER = struct.Struct(">I")
DEFAULT_PORT = 47800


@dataclass(frozen=True)
class BrokerMessage:
    type: str
    sender: int
    seq: int
    payload: dict = field(default_factory=dict)
    version: int = VERSION


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------


def _float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("non-finite floats cannot be encoded")
    return repr(x)  # shortest string that round-trips


def _dump(obj, out: list) -> None:
    if obj is None:
        out.append("null")
    elif obj is True or obj is False or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise TypeError("object keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _dump(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _dump(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats in their shortest round-trip form."""
    out: list[str] = []
    _dump(obj, out)
    return "".join(out)


def encode(message: BrokerMessage) -> bytes:
    body = canonical_json(
        {
            "version": message.version,
            "type": message.type,
            "sender": message.sender,
            "seq": message.seq,
            "payload": message.payload,
        }
    ).encode("utf-8")
    return _HEADER.pack(len(body)) + body


def _reject_constant(name: str):
    raise ValueError(f"{name} is not allowed")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def decode(frame: bytes) -> BrokerMessage:
    """Inverse of :func:`encode` for exactly one frame."""
    msg, used = decode_prefix(frame)
    if used != len(frame):
        raise MalformedPayload(f"{len(frame) - used} trailing bytes after frame")
    return msg


def decode_prefix(buf: bytes) -> tuple[BrokerMessage, int]:
    """Decode the first frame in ``buf``; returns the message and bytes consumed."""
    if len(buf) < _HEADER.size:
        raise TruncatedFrame(f"need {_HEADER.size} header bytes, have {len(buf)}")
    (length,) = _HEADER.unpack_from(buf)
    end = _HEADER.size + length
    if len(buf) < end:
        raise TruncatedFrame(f"frame declares {length} bytes, {len(buf) - _HEADER.size} available")
    try:
        obj = json.loads(bytes(buf[_HEADER.size : end]).decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedPayload(f"payload is not valid JSON: {exc}") from None
    return _message_from(obj), end


def _message_from(obj) -> BrokerMessage:
    if not isinstance(obj, dict):
        raise MalformedPayload("payload must be a JSON object")
    if set(obj) != {"version", "type", "sender", "seq", "payload"}:
        raise MalformedPayload(f"unexpected envelope fields {sorted(obj)}")
    version = obj["version"]
    if not _is_int(version):
        raise MalformedPayload("version must be an integer")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} is not supported")
    if obj["type"] not in MESSAGE_TYPES:
        raise MalformedPayload(f"unknown message type {obj['type']!r}")
    for key in ("sender", "seq"):
        if not _is_int(obj[key]) or obj[key] < 0:
            raise MalformedPayload(f"{key} must be a non-negative integer")
    if not isinstance(obj["payload"], dict):
        raise MalformedPayload("message payload must be an object")
    _check_payload(obj["type"], obj["payload"])
    return BrokerMessage(obj["type"], obj["sender"], obj["seq"], obj["payload"], version)


def _numbers(v, name: str) -> None:
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise MalformedPayload(f"{name} must be a list of numbers")


def _check_payload(kind: str, p: dict) -> None:
    try:
        if kind == ROOM_DESC:
            if not _is_int(p["room_id"]):
                raise MalformedPayload("room_id must be an integer")
            _numbers(p["center"], "center")
            _numbers(p["cloud"], "cloud")
            if len(p["cloud"]) % 3:
                raise MalformedPayload("cloud length must be a multiple of 3")
            if p.get("matrix") is not None:
                _numbers(p["matrix"], "matrix")
                if len(p["matrix"]) != p["n_rings"] * p["n_sectors"]:
                    raise MalformedPayload("matrix size does not match its shape")
        elif kind == GRAPH_SHARE:
            for r in p["rooms"]:
                if not _is_int(r["id"]):
                    raise MalformedPayload("room id must be an integer")
                _numbers(r["t"], "room translation")
                _numbers(r["q"], "room rotation")
            for pl in p["planes"]:
                if not _is_int(pl["id"]):
                    raise MalformedPayload("plane id must be an integer")
                _numbers(pl["n"], "plane normal")
                _numbers([pl["d"]], "plane offset")
            for e in p["edges"]:
                if not (isinstance(e, list) and len(e) == 2 and all(_is_int(x) for x in e)):
                    raise MalformedPayload("edges must be [room, plane] integer pairs")
    except (KeyError, TypeError) as exc:
        raise MalformedPayload(f"bad {kind} payload: {exc!r}") from None


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


class ByteCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.bytes = defaultdict(int)
        self.messages = defaultdict(int)

    def add(self, kind: str, n: int) -> None:
        with self._lock:
            self.bytes[kind] += n
            self.messages[kind] += 1

    def summary(self) -> dict:
        with self._lock:
            return {k: {"bytes": self.bytes[k], "messages": self.messages[k]} for k in sorted(self.bytes)}

    def total(self, kinds: Iterable[str] | None = None) -> int:
        with self._lock:
            kinds = list(self.bytes) if kinds is None else kinds
            return sum(self.bytes[k] for k in kinds)


# ---------------------------------------------------------------------------
# in-memory bus
# ---------------------------------------------------------------------------


@dataclass
class LinkModel:
    drop: float = 0.0
    duplicate: float = 0.0
    reorder: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.drop <= 1.0 and 0.0 <= self.duplicate <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")


class InMemoryBus:
    """Frames are queued per recipient; the link model is applied on delivery.

    Senders may call from several threads; each recipient drains serially.
    """

    def __init__(self, link: LinkModel | None = None) -> None:
        self.link = link or LinkModel()
        self._rng = np.random.default_rng(self.link.seed)
        self._lock = threading.Lock()
        self._pending: dict[int, list[bytes]] = {}
        self._seq: dict[int, int] = defaultdict(int)
        self.counter = ByteCounter()

    def register(self, agent_id: int) -> None:
        with self._lock:
            self._pending.setdefault(agent_id, [])

    @property
    def agents(self) -> list[int]:
        return sorted(self._pending)

    def next_seq(self, sender: int) -> int:
        with self._lock:
            s = self._seq[sender]
            self._seq[sender] += 1
            return s

    def send(self, message: BrokerMessage, to: Optional[int] = None) -> int:
        """Queue ``message`` for ``to`` (or every other agent); returns frames queued."""
        frame = encode(message)
        with self._lock:
            targets = [to] if to is not None else [a for a in sorted(self._pending) if a != message.sender]
            for t in targets:
                if t not in self._pending:
                    raise PeerUnreachable(f"agent {t} is not on the bus")
                self._pending[t].append(frame)
                self.counter.add(message.type, len(frame))
        return len(targets)

    def deliver(self, agent_id: int) -> list[BrokerMessage]:
        """Everything queued for ``agent_id`` after drop / duplicate / reorder."""
        with self._lock:
            frames = self._pending.get(agent_id)
            if frames is None:
                raise PeerUnreachable(f"agent {agent_id} is not on the bus")
            self._pending[agent_id] = []
            out = []
            for f in frames:
                if self.link.drop and self._rng.random() < self.link.drop:
                    continue
                out.append(f)
                if self.link.duplicate and self._rng.random() < self.link.duplicate:
                    out.append(f)
            if self.link.reorder and len(out) > 1:
                out = [out[i] for i in self._rng.permutation(len(out))]
        return [decode(f) for f in out]

    def pending(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._pending.values())


# ---------------------------------------------------------------------------
# sockets
# ---------------------------------------------------------------------------


def base_port(default: int = DEFAULT_PORT) -> int:
    env = os.environ.get("MSGRAPH_PORT")
    return int(env) if env else default


class SocketEndpoint:
    """One agent's TCP listener plus lazily opened outgoing connections.

    Order is preserved per connection. Received frames are decoded on the
    reader thread and queued for :meth:`deliver`.
    """

    def __init__(self, agent_id: int, host: str = "127.0.0.1", port: int = 0, counter: ByteCounter | None = None):
        self.agent_id = agent_id
        self.host = host
        self.counter = counter or ByteCounter()
        self._server = socket.create_server((host, port))
        self.port = self._server.getsockname()[1]
        self._inbox: queue.Queue = queue.Queue()
        self._peers: dict[int, tuple[str, int]] = {}
        self._conns: dict[int, socket.socket] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._seq = 0
        self.received = 0
        self._readers: list[threading.Thread] = []
        self._acceptor = threading.Thread(target=self._accept, daemon=True)
        self._acceptor.start()

    def add_peer(self, agent_id: int, host: str, port: int) -> None:
        self._peers[agent_id] = (host, port)

    def next_seq(self, sender: int | None = None) -> int:
        with self._lock:
            s = self._seq
            self._seq += 1
            return s

    def _accept(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read, args=(conn,), daemon=True)
            t.start()
            self._readers.append(t)

    def _read(self, conn: socket.socket) -> None:
        buf = b""
        with conn:
            while True:
                try:
                    chunk = conn.recv(65536)
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk
                while True:
                    try:
                        msg, used = decode_prefix(buf)
                    except TruncatedFrame:
                        break
                    buf = buf[used:]
                    self.received += 1
                    self._inbox.put(msg)

    def _connection(self, peer: int) -> socket.socket:
        conn = self._conns.get(peer)
        if conn is None:
            if peer not in self._peers:
                raise PeerUnreachable(f"no address for agent {peer}")
            try:
                conn = socket.create_connection(self._peers[peer], timeout=5.0)
            except OSError as exc:
                raise PeerUnreachable(f"agent {peer} at {self._peers[peer]}: {exc}") from None
            self._conns[peer] = conn
        return conn

    def send(self, message: BrokerMessage, to: Optional[int] = None) -> int:
        frame = encode(message)
        targets = [to] if to is not None else sorted(self._peers)
        with self._lock:
            for t in targets:
                try:
                    self._connection(t).sendall(frame)
                except OSError as exc:
                    self._conns.pop(t, None)
                    raise PeerUnreachable(f"send to agent {t} failed: {exc}") from None
                self.counter.add(message.type, len(frame))
        return len(targets)

    def deliver(self, agent_id: int | None = None, timeout: float = 0.0) -> list[BrokerMessage]:
        out = []
        try:
            out.append(self._inbox.get(timeout=timeout) if timeout > 0 else self._inbox.get_nowait())
            while True:
                out.append(self._inbox.get_nowait())
        except queue.Empty:
            pass
        return out

    def close(self) -> None:
        self._closed.set()
        with self._lock:
            for c in self._conns.values():
                c.close()
            self._conns.clear()
        try:
            self._server.shutdown(socket.SHUT_RDWR)  # wakes the blocked accept
        except OSError:
            pass
        self._server.close()
        self._acceptor.join(timeout=1.0)


__all__ = [
    "ACK",
    "GRAPH_SHARE",
    "HELLO",
    "MESSAGE_TYPES",
    "ROOM_DESC",
    "VERSION",
    "BrokerMessage",
    "ByteCounter",
    "InMemoryBus",
    "LinkModel",
    "SocketEndpoint",
    "base_port",
    "canonical_json",
    "decode",
    "decode_prefix",
    "encode",
]
