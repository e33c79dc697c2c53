"""Length-prefixed frames over TCP.

Header, little-endian, 15 bytes: magic ``CFG1`` | version u8 | type u8 |
batch_id u32 | flags u8 | payload_len u32. Flag bit 0 marks a zlib-compressed
payload.
"""
from __future__ import annotations

import enum
import json
import socket
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"CFG1"
VERSION = 1
HEADER = struct.Struct("<4sBBIBI")
FLAG_COMPRESSED = 0x01
COMPRESS_THRESHOLD = 4096
MAX_PAYLOAD = 1 << 30
CODECS = ("zlib", "identity")

TENSOR_HEADER = struct.Struct("<HII")
GRAPH_HEADER = struct.Struct("<HII")


class ProtocolError(RuntimeError):
    pass


class MsgType(enum.IntEnum):
    HELLO = 1
    ARCH = 2
    TENSOR = 3
    GRAPH = 4
    RESULT = 5
    ACK = 6
    BYE = 7


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    batch_id: int = 0
    payload: bytes = b""
    flags: int = 0


def encode_frame(frame: Frame, codec: str = "zlib", threshold: int = COMPRESS_THRESHOLD) -> bytes:
    """Serialize; payloads above ``threshold`` are compressed when ``codec`` is zlib
    and compression actually shrinks them."""
    payload = frame.payload
    flags = frame.flags & ~FLAG_COMPRESSED
    if codec == "zlib" and len(payload) > threshold:
        packed = zlib.compress(payload, 1)
        if len(packed) < len(payload):
            payload, flags = packed, flags | FLAG_COMPRESSED
    elif codec not in CODECS:
        raise ProtocolError(f"unknown codec {codec!r}")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), frame.batch_id, flags, len(payload)) + payload


def decode_header(raw: bytes) -> tuple[MsgType, int, int, int]:
    if len(raw) != HEADER.size:
        raise ProtocolError(f"short header ({len(raw)} bytes)")
    magic, version, mtype, batch_id, flags, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        mt = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    return mt, batch_id, flags, length


def decode_payload(flags: int, body: bytes) -> bytes:
    if flags & FLAG_COMPRESSED:
        try:
            return zlib.decompress(body)
        except zlib.error as exc:
            raise ProtocolError(f"corrupt compressed payload: {exc}") from None
    return body


def decode_frame(data: bytes) -> Frame:
    """Inverse of ``encode_frame`` for one complete frame."""
    mt, batch_id, flags, length = decode_header(data[:HEADER.size])
    body = data[HEADER.size:]
    if len(body) != length:
        raise ProtocolError(f"payload length mismatch: header says {length}, got {len(body)}")
    return Frame(mt, batch_id, decode_payload(flags, body), flags & ~FLAG_COMPRESSED)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[Frame, int]:
    """Next frame and its size on the wire."""
    mt, batch_id, flags, length = decode_header(recv_exact(sock, HEADER.size))
    body = recv_exact(sock, length) if length else b""
    return Frame(mt, batch_id, decode_payload(flags, body), flags & ~FLAG_COMPRESSED), HEADER.size + length


class Pacer:
    """Token-bucket sender pacing with no burst allowance.

    Each message occupies the link for ``bytes * 8 / rate`` seconds; a
    message queued while the link is busy waits for the previous one.
    """

    def __init__(self, rate_bps: float | None, chunk: int = 16384):
        if rate_bps is not None and not rate_bps > 0:
            raise ValueError("throttle rate must be positive")
        self.rate = rate_bps
        self.chunk = chunk
        self._free_at = 0.0

    def send(self, sock: socket.socket, data: bytes) -> None:
        if self.rate is None:
            sock.sendall(data)
            return
        start = max(time.perf_counter(), self._free_at)
        view = memoryview(data)
        sent = 0
        while sent < len(data):
            part = view[sent:sent + self.chunk]
            sock.sendall(part)
            sent += len(part)
            release = start + sent * 8.0 / self.rate
            delay = release - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        self._free_at = start + len(data) * 8.0 / self.rate


# --- payload codecs ---------------------------------------------------------------

def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def unpack_json(data: bytes):
    try:
        return json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from None


def pack_tensor(layer: int, x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    return TENSOR_HEADER.pack(layer, x.shape[0], x.shape[1]) + x.tobytes()


def unpack_tensor(data: bytes) -> tuple[int, np.ndarray]:
    if len(data) < TENSOR_HEADER.size:
        raise ProtocolError("short tensor payload")
    layer, n, f = TENSOR_HEADER.unpack_from(data)
    body = data[TENSOR_HEADER.size:]
    if len(body) != n * f * 4:
        raise ProtocolError(f"tensor payload holds {len(body)} bytes, expected {n * f * 4}")
    return layer, np.frombuffer(body, dtype="<f4").reshape(n, f).astype(np.float32)


def pack_graph(layer: int, nbr: np.ndarray) -> bytes:
    """Edge list as (src, dst) int32 pairs, one per neighbor slot."""
    n, k = nbr.shape
    src = np.repeat(np.arange(n, dtype="<i4"), k)
    pairs = np.stack([src, nbr.reshape(-1).astype("<i4")], axis=1)
    return GRAPH_HEADER.pack(layer, n, k) + pairs.tobytes()


def unpack_graph(data: bytes) -> tuple[int, np.ndarray]:
    if len(data) < GRAPH_HEADER.size:
        raise ProtocolError("short graph payload")
    layer, n, k = GRAPH_HEADER.unpack_from(data)
    body = data[GRAPH_HEADER.size:]
    if len(body) != n * k * 8:
        raise ProtocolError(f"graph payload holds {len(body)} bytes, expected {n * k * 8}")
    pairs = np.frombuffer(body, dtype="<i4").reshape(n * k, 2)
    return layer, pairs[:, 1].astype(np.int64).reshape(n, k)


def error_payload(message: str) -> bytes:
    return pack_json({"error": message})
