"""Framed binary messages and the transports that carry them.

Frame layout (little endian)::

    b"EFC1" | version u8 | type u8 | payload length u32 | payload

Ciphertext payloads are ``step u32 | count u32`` followed by ``count``
ciphertexts in the backend wire form, each of which carries its own length.
Every transport moves encoded bytes, so the in-process channel exercises the
same parser as the socket channel.
"""

from __future__ import annotations

import enum
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EFC1"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 64 * 2**20


class MsgType(enum.IntEnum):
    HELLO = 1
    PARAMS = 2
    SENSOR_DATA = 3
    CONTROL_ACTION = 4
    STATE_REFRESH_DOWN = 5
    STATE_REFRESH_UP = 6
    BYE = 7


class ProtocolError(ValueError):
    """Malformed or unexpected frame."""


class TransportError(RuntimeError):
    """Channel closed, timed out or otherwise unusable."""


class TransportTimeout(TransportError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, int(self.type), len(self.payload)) + self.payload

    @staticmethod
    def parse_header(header: bytes) -> tuple[MsgType, int]:
        if len(header) != HEADER.size:
            raise ProtocolError("truncated frame header")
        magic, version, mtype, length = HEADER.unpack(header)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        try:
            mtype = MsgType(mtype)
        except ValueError as exc:
            raise ProtocolError(f"unknown message type {mtype}") from exc
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"payload length {length} exceeds the limit")
        return mtype, length

    @classmethod
    def decode(cls, data: bytes) -> "WireMessage":
        mtype, length = cls.parse_header(bytes(data[:HEADER.size]))
        if len(data) != HEADER.size + length:
            raise ProtocolError("payload length does not match the header")
        return cls(mtype, bytes(data[HEADER.size:]))


# -- payload codecs -------------------------------------------------------------------

def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def unpack_json(data: bytes):
    try:
        return json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("payload is not valid JSON") from exc


def pack_ciphertexts(step: int, cts) -> bytes:
    cts = list(cts)
    return struct.pack("<II", step, len(cts)) + b"".join(c.to_bytes() for c in cts)


def unpack_ciphertexts(data: bytes, backend, offset: int = 0) -> tuple[int, list]:
    """Returns ``(step, ciphertexts)``; the payload must be consumed exactly."""
    if len(data) - offset < 8:
        raise ProtocolError("truncated ciphertext list")
    step, count = struct.unpack_from("<II", data, offset)
    pos = offset + 8
    out = []
    for _ in range(count):
        try:
            ct, pos = backend.read_ciphertext(data, pos)
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc
        out.append(ct)
    if pos != len(data):
        raise ProtocolError("trailing bytes after ciphertext list")
    return step, out


def pack_params(meta: dict, blob: bytes = b"") -> bytes:
    """PARAMS payload: ``json length u32 | json | ciphertext list``."""
    head = pack_json(meta)
    return struct.pack("<I", len(head)) + head + blob


def unpack_params(data: bytes) -> tuple[dict, int]:
    """Returns the metadata and the offset of the ciphertext list."""
    if len(data) < 4:
        raise ProtocolError("truncated PARAMS payload")
    (n,) = struct.unpack_from("<I", data)
    if 4 + n > len(data):
        raise ProtocolError("truncated PARAMS metadata")
    return unpack_json(data[4:4 + n]), 4 + n


# -- transports -----------------------------------------------------------------------

@dataclass
class ChannelStats:
    sent: dict = field(default_factory=dict)  # MsgType -> count
    bytes_sent: int = 0
    dropped: dict = field(default_factory=dict)

    def count(self, mtype: MsgType) -> int:
        return self.sent.get(mtype, 0)


class Channel:
    """Bidirectional, order-preserving message pipe."""

    def __init__(self):
        self.stats = ChannelStats()

    def _record(self, msg: WireMessage, nbytes: int) -> None:
        self.stats.sent[msg.type] = self.stats.sent.get(msg.type, 0) + 1
        self.stats.bytes_sent += nbytes

    def send(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> WireMessage:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InprocChannel(Channel):
    """One end of an in-process pipe; use :func:`inproc_pair`."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._in, self._out = inbox, outbox
        self.closed = False

    def send(self, msg: WireMessage) -> None:
        if self.closed:
            raise TransportError("channel closed")
        data = msg.encode()
        self._out.put(data)
        self._record(msg, len(data))

    def recv(self, timeout: float | None = None) -> WireMessage:
        try:
            data = self._in.get(timeout=timeout)
        except queue.Empty as exc:
            raise TransportTimeout(f"no message within {timeout} s") from exc
        if data is None:
            raise TransportError("peer closed the channel")
        return WireMessage.decode(data)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._out.put(None)


def inproc_pair() -> tuple[InprocChannel, InprocChannel]:
    a, b = queue.Queue(), queue.Queue()
    return InprocChannel(a, b), InprocChannel(b, a)


class SocketChannel(Channel):
    """Frames over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketChannel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock)

    def send(self, msg: WireMessage) -> None:
        data = msg.encode()
        try:
            with self._lock:
                self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        self._record(msg, len(data))

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout as exc:
                raise TransportTimeout("socket receive timed out") from exc
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout: float | None = None) -> WireMessage:
        self.sock.settimeout(timeout)
        mtype, length = WireMessage.parse_header(self._read_exact(HEADER.size))
        return WireMessage(mtype, self._read_exact(length) if length else b"")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 8) -> socket.socket:
    """Bound and listening server socket; ``port = 0`` picks a free port."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
    except OSError as exc:
        srv.close()
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
    srv.listen(backlog)
    return srv


@dataclass
class DropPolicy:
    """Which outgoing messages a :class:`LossyChannel` discards.

    Messages whose type is in ``types`` are dropped with ``probability``
    once ``after`` of them have gone through.
    """

    types: tuple = (MsgType.STATE_REFRESH_DOWN,)
    probability: float = 1.0
    after: int = 0
    delay: float = 0.0  # seconds added before every send

    def to_dict(self) -> dict:
        return {"types": [MsgType(t).name for t in self.types], "probability": self.probability,
                "after": self.after, "delay": self.delay}

    @classmethod
    def from_dict(cls, d: dict) -> "DropPolicy":
        return cls(tuple(MsgType[t] for t in d.get("types", ["STATE_REFRESH_DOWN"])),
                   float(d.get("probability", 1.0)), int(d.get("after", 0)), float(d.get("delay", 0.0)))


class LossyChannel(Channel):
    """Decorator injecting packet loss and a fixed delay on the sending side."""

    def __init__(self, inner: Channel, policy: DropPolicy, seed: int = 0):
        super().__init__()
        self.inner, self.policy = inner, policy
        self.rng = np.random.default_rng(seed)
        self._seen = 0
        self.stats = inner.stats

    def send(self, msg: WireMessage) -> None:
        if self.policy.delay > 0:
            time.sleep(self.policy.delay)
        if msg.type in self.policy.types:
            self._seen += 1
            if self._seen > self.policy.after and self.rng.random() < self.policy.probability:
                self.stats.dropped[msg.type] = self.stats.dropped.get(msg.type, 0) + 1
                return
        self.inner.send(msg)

    def recv(self, timeout: float | None = None) -> WireMessage:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


class RecordingChannel(Channel):
    """Decorator appending every received frame of the given types to a binary log."""

    def __init__(self, inner: Channel, sink, types=(MsgType.CONTROL_ACTION,)):
        super().__init__()
        self.inner, self.sink, self.types = inner, sink, tuple(types)
        self.stats = inner.stats

    def send(self, msg: WireMessage) -> None:
        self.inner.send(msg)

    def recv(self, timeout: float | None = None) -> WireMessage:
        msg = self.inner.recv(timeout)
        if msg.type in self.types:
            self.sink.write(msg.encode())
        return msg

    def close(self) -> None:
        self.inner.close()
