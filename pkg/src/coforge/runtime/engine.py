"""Two-endpoint co-inference over TCP.

Each side runs one compute worker plus independent sender and receiver
workers joined by bounded queues. The device admits at most
``pipeline_depth`` batches at a time; a batch finishes when its final
tensor is available on the device, either computed locally or returned by
the edge as RESULT.
"""
from __future__ import annotations

import hashlib
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..design_space import Architecture, Mapping, OpKind, derive_mapping, forwards_graph, trace_shapes
from .ops import OpState, WeightBank, run_segment, synthetic_input
from .wire import (CODECS, Frame, MsgType, Pacer, ProtocolError, encode_frame, error_payload, pack_graph,
                   pack_json, pack_tensor, read_frame, unpack_graph, unpack_json, unpack_tensor, VERSION)

log = logging.getLogger(__name__)

_STOP = object()


# --- deployment --------------------------------------------------------------------

@dataclass(frozen=True)
class DeploymentDescriptor:
    arch: Architecture
    mapping: Mapping
    compression: str = "zlib"
    seed: int = 0
    test_mode: bool = False

    @classmethod
    def for_arch(cls, arch: Architecture, compression: str = "zlib", seed: int = 0,
                 test_mode: bool = False) -> "DeploymentDescriptor":
        return cls(arch, derive_mapping(arch), compression, seed, test_mode)

    def to_json(self) -> dict:
        return {"arch": self.arch.to_json(), "mapping": self.mapping.to_json(),
                "trace": trace_shapes(self.arch).to_json(), "compression": self.compression,
                "seed": self.seed, "test_mode": self.test_mode}

    def to_bytes(self) -> bytes:
        return pack_json(self.to_json())

    @classmethod
    def from_json(cls, d: dict) -> "DeploymentDescriptor":
        arch = Architecture.from_json(d["arch"])
        mapping = Mapping.from_json(d["mapping"])
        if mapping != derive_mapping(arch):
            raise ProtocolError("descriptor mapping disagrees with its architecture")
        if d.get("compression", "zlib") not in CODECS:
            raise ProtocolError(f"unknown codec {d.get('compression')!r}")
        return cls(arch, mapping, d.get("compression", "zlib"), int(d.get("seed", 0)),
                   bool(d.get("test_mode", False)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeploymentDescriptor":
        return cls.from_json(unpack_json(data))


def segment_end(arch: Architecture, start: int) -> int:
    """Index of the first Communicate at or after ``start`` (len(arch) if none)."""
    for i in range(start, len(arch)):
        if arch.layers[i].op is OpKind.COMMUNICATE:
            return i
    return len(arch)


# --- shared plumbing -------------------------------------------------------------------

class _Link:
    """Sender and receiver workers around one socket."""

    def __init__(self, sock: socket.socket, codec: str, throttle_bps: float | None, queue_size: int,
                 on_frame, name: str):
        self.sock = sock
        self.codec = codec
        self.pacer = Pacer(throttle_bps)
        self.send_q: queue.Queue = queue.Queue(maxsize=queue_size)
        self.on_frame = on_frame
        self.bytes_sent = 0
        self.bytes_received = 0
        self.payload_raw = 0
        self.payload_wire = 0
        self.error: BaseException | None = None
        self.closed = threading.Event()
        self._sender = threading.Thread(target=self._send_loop, name=f"{name}-send", daemon=True)
        self._receiver = threading.Thread(target=self._recv_loop, name=f"{name}-recv", daemon=True)

    def start(self) -> None:
        self._sender.start()
        self._receiver.start()

    def send(self, frame: Frame) -> None:
        if self.error is not None:
            raise ConnectionError(f"link failed: {self.error}")
        self.send_q.put(frame)

    def _send_loop(self) -> None:
        try:
            while True:
                frame = self.send_q.get()
                if frame is _STOP:
                    return
                data = encode_frame(frame, self.codec)
                self.pacer.send(self.sock, data)
                self.bytes_sent += len(data)
                if frame.msg_type in (MsgType.TENSOR, MsgType.GRAPH, MsgType.RESULT):
                    self.payload_raw += len(frame.payload)
                    self.payload_wire += len(data) - 15
        except (OSError, ConnectionError) as exc:
            self._fail(exc)

    def _recv_loop(self) -> None:
        try:
            while True:
                frame, size = read_frame(self.sock)
                self.bytes_received += size
                if self.on_frame(frame) is False:
                    return
        except (OSError, ConnectionError, ProtocolError) as exc:
            if not self.closed.is_set():
                self._fail(exc)
        finally:
            self.closed.set()

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        self.closed.set()
        self.on_frame(None)

    def drain(self, timeout: float = 30.0) -> None:
        self.send_q.put(_STOP)
        self._sender.join(timeout)

    def join_receiver(self, timeout: float = 5.0) -> None:
        self._receiver.join(timeout)


def _send_state(link: _Link, arch: Architecture, batch: int, comm_idx: int, state: OpState) -> None:
    """Ship the output of the segment ending at Communicate ``comm_idx``."""
    nxt = comm_idx + 1
    if forwards_graph(arch, comm_idx) and state.nbr is not None:
        link.send(Frame(MsgType.GRAPH, batch, pack_graph(nxt, state.nbr)))
    link.send(Frame(MsgType.TENSOR, batch, pack_tensor(nxt, state.x)))


class _Inbox:
    """Pairs GRAPH frames with the TENSOR that follows for the same batch."""

    def __init__(self):
        self.graphs: dict[int, np.ndarray] = {}

    def accept(self, frame: Frame):
        if frame.msg_type is MsgType.GRAPH:
            _, nbr = unpack_graph(frame.payload)
            self.graphs[frame.batch_id] = nbr
            return None
        layer, x = unpack_tensor(frame.payload)
        return frame.batch_id, layer, OpState(x, self.graphs.pop(frame.batch_id, None))


# --- edge ------------------------------------------------------------------------------

@dataclass
class EdgeConfig:
    throttle_bps: float | None = None
    queue_size: int = 8
    # batch_id -> seconds of artificial stall before computing (tests)
    inject_delay: dict = field(default_factory=dict)
    codecs: tuple = CODECS


def _handshake_edge(sock: socket.socket, cfg: EdgeConfig) -> tuple[str, DeploymentDescriptor] | None:
    frame, _ = read_frame(sock)
    if frame.msg_type is not MsgType.HELLO:
        raise ProtocolError(f"expected HELLO, got {frame.msg_type.name}")
    hello = unpack_json(frame.payload)
    if hello.get("version") != VERSION:
        sock.sendall(encode_frame(Frame(MsgType.BYE, 0, error_payload(
            f"version {hello.get('version')} not supported (edge speaks {VERSION})")), "identity"))
        return None
    offered = [c for c in hello.get("codecs", ["identity"]) if c in cfg.codecs]
    codec = offered[0] if offered else "identity"
    sock.sendall(encode_frame(Frame(MsgType.HELLO, 0, pack_json({"version": VERSION, "codec": codec})), "identity"))
    frame, _ = read_frame(sock)
    if frame.msg_type is not MsgType.ARCH:
        raise ProtocolError(f"expected ARCH, got {frame.msg_type.name}")
    desc = DeploymentDescriptor.from_bytes(frame.payload)
    sock.sendall(encode_frame(Frame(MsgType.ACK, 0), "identity"))
    return codec, desc


def handle_session(sock: socket.socket, cfg: EdgeConfig) -> None:
    """Serve one device connection until BYE or disconnect."""
    hs = _handshake_edge(sock, cfg)
    if hs is None:
        return
    codec, desc = hs
    state = {"desc": desc, "bank": WeightBank(desc.arch, desc.seed, desc.test_mode)}
    work: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
    inbox = _Inbox()

    def on_frame(frame):
        if frame is None:
            work.put(_STOP)
            return False
        if frame.msg_type in (MsgType.TENSOR, MsgType.GRAPH):
            item = inbox.accept(frame)
            if item is not None:
                work.put(item)
            return True
        if frame.msg_type is MsgType.ARCH:
            work.put(("arch", DeploymentDescriptor.from_bytes(frame.payload)))
            return True
        if frame.msg_type is MsgType.BYE:
            work.put(_STOP)
            return False
        raise ProtocolError(f"unexpected {frame.msg_type.name} from device")

    link = _Link(sock, codec, cfg.throttle_bps, cfg.queue_size, on_frame, "edge")
    link.start()
    while True:
        item = work.get()
        if item is _STOP:
            break
        if item[0] == "arch":
            state["desc"] = item[1]
            state["bank"] = WeightBank(item[1].arch, item[1].seed, item[1].test_mode)
            link.send(Frame(MsgType.ACK, 0))
            continue
        batch, layer, st = item
        arch = state["desc"].arch
        delay = cfg.inject_delay.get(batch)
        if delay:
            time.sleep(delay)
        stop = segment_end(arch, layer)
        st = run_segment(arch, layer, stop, st, state["bank"])
        if stop == len(arch):
            link.send(Frame(MsgType.RESULT, batch, pack_tensor(stop, st.x)))
        else:
            _send_state(link, arch, batch, stop, st)
    if link.error is None:
        try:
            link.send(Frame(MsgType.BYE, 0))
        except ConnectionError:
            pass
    link.drain()
    if link.error is not None:
        log.warning("edge session ended with error: %s", link.error)


class EdgeServer:
    """``serve_edge`` loop on a background thread; sessions are served one at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, cfg: EdgeConfig | None = None):
        self.cfg = cfg or EdgeConfig()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(4)
        self.address = self.sock.getsockname()
        self.errors: list[str] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self.serve_forever, name="edge-accept", daemon=True)

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "EdgeServer":
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                handle_session(conn, self.cfg)
            except (ProtocolError, ConnectionError, OSError, ValueError, KeyError) as exc:
                log.error("closing session: %s", exc)
                self.errors.append(str(exc))
            finally:
                conn.close()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(2.0)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_edge(bind: str, cfg: EdgeConfig | None = None) -> None:
    host, _, port = bind.rpartition(":")
    server = EdgeServer(host or "0.0.0.0", int(port), cfg)
    log.info("edge listening on %s:%d", *server.address)
    server.serve_forever()


# --- device ------------------------------------------------------------------------------

@dataclass
class RunConfig:
    pipeline_depth: int = 2
    throttle_bps: float | None = None
    codec: str = "zlib"
    seed: int = 0
    test_mode: bool = False
    queue_size: int = 8
    timeout_s: float = 120.0


@dataclass
class RunReport:
    num_batches: int
    latencies_s: list[float]
    batch_start: list[float]
    batch_end: list[float]
    wall_s: float
    bytes_sent: int
    bytes_received: int
    compression_ratio: float
    results: dict[int, str]
    failed: list[int] = field(default_factory=list)
    error: str | None = None

    @property
    def throughput_ips(self) -> float:
        done = self.num_batches - len(self.failed)
        return done / self.wall_s if self.wall_s > 0 else 0.0

    @property
    def mean_latency_s(self) -> float:
        ok = [v for v in self.latencies_s if v == v]
        return float(np.mean(ok)) if ok else float("nan")

    def to_json(self) -> dict:
        return {"num_batches": self.num_batches, "latencies_s": self.latencies_s, "wall_s": self.wall_s,
                "throughput_ips": self.throughput_ips, "mean_latency_s": self.mean_latency_s,
                "bytes_sent": self.bytes_sent, "bytes_received": self.bytes_received,
                "compression_ratio": self.compression_ratio,
                "results": {str(k): v for k, v in sorted(self.results.items())},
                "failed": self.failed, "error": self.error}


def result_digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f4").tobytes()).hexdigest()[:16]


def _connect(addr) -> socket.socket:
    if isinstance(addr, str):
        host, _, port = addr.rpartition(":")
        addr = (host, int(port))
    sock = socket.create_connection(addr, timeout=10.0)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _handshake_device(sock: socket.socket, desc: DeploymentDescriptor, codec: str) -> str:
    sock.sendall(encode_frame(Frame(MsgType.HELLO, 0, pack_json({"version": VERSION, "codecs": [codec, "identity"]})),
                              "identity"))
    frame, _ = read_frame(sock)
    if frame.msg_type is MsgType.BYE:
        raise ProtocolError(f"edge refused session: {unpack_json(frame.payload).get('error')}")
    if frame.msg_type is not MsgType.HELLO:
        raise ProtocolError(f"expected HELLO, got {frame.msg_type.name}")
    agreed = unpack_json(frame.payload).get("codec", "identity")
    sock.sendall(encode_frame(Frame(MsgType.ARCH, 0, desc.to_bytes()), "identity"))
    frame, _ = read_frame(sock)
    if frame.msg_type is not MsgType.ACK:
        raise ProtocolError(f"expected ACK, got {frame.msg_type.name}")
    return agreed


def run_device(edge_addr, arch: Architecture, num_batches: int, cfg: RunConfig | None = None) -> RunReport:
    """Run ``num_batches`` synthetic batches through the co-inference pipeline."""
    cfg = cfg or RunConfig()
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if cfg.pipeline_depth < 1:
        raise ValueError("pipeline_depth must be >= 1")
    desc = DeploymentDescriptor.for_arch(arch, cfg.codec, cfg.seed, cfg.test_mode)
    bank = WeightBank(arch, cfg.seed, cfg.test_mode)
    sock = _connect(edge_addr)
    codec = _handshake_device(sock, desc, cfg.codec)
    work: queue.Queue = queue.Queue()
    inbox = _Inbox()

    def on_frame(frame):
        if frame is None:
            work.put(_STOP)
            return False
        if frame.msg_type in (MsgType.TENSOR, MsgType.GRAPH):
            item = inbox.accept(frame)
            if item is not None:
                work.put(item)
            return True
        if frame.msg_type is MsgType.RESULT:
            _, x = unpack_tensor(frame.payload)
            work.put(("result", frame.batch_id, x))
            return True
        if frame.msg_type is MsgType.ACK:
            return True
        if frame.msg_type is MsgType.BYE:
            if frame.payload:
                raise ProtocolError(f"edge error: {unpack_json(frame.payload).get('error')}")
            return False
        raise ProtocolError(f"unexpected {frame.msg_type.name} from edge")

    link = _Link(sock, codec, cfg.throttle_bps, cfg.queue_size, on_frame, "device")
    link.start()
    start = [float("nan")] * num_batches
    end = [float("nan")] * num_batches
    results: dict[int, str] = {}
    in_flight: set[int] = set()
    next_batch = 0
    error = None
    t0 = time.perf_counter()

    def advance(batch: int, layer: int, st: OpState) -> None:
        stop = segment_end(arch, layer)
        st = run_segment(arch, layer, stop, st, bank)
        if stop == len(arch):
            finish(batch, st.x)
        else:
            _send_state(link, arch, batch, stop, st)

    def finish(batch: int, x: np.ndarray) -> None:
        end[batch] = time.perf_counter()
        results[batch] = result_digest(x)
        in_flight.discard(batch)

    try:
        while len(results) < num_batches:
            try:
                item = work.get_nowait()
            except queue.Empty:
                item = None
            if item is None and next_batch < num_batches and len(in_flight) < cfg.pipeline_depth:
                b = next_batch
                next_batch += 1
                in_flight.add(b)
                start[b] = time.perf_counter()
                advance(b, 0, OpState(synthetic_input(arch.input_shape, cfg.seed, b)))
                continue
            if item is None:
                try:
                    item = work.get(timeout=cfg.timeout_s)
                except queue.Empty:
                    raise TimeoutError(f"no progress for {cfg.timeout_s} s") from None
            if item is _STOP:
                raise ConnectionError(f"link closed: {link.error}")
            if item[0] == "result":
                finish(item[1], item[2])
            else:
                advance(*item)
    except (ConnectionError, TimeoutError, OSError, ProtocolError) as exc:
        error = str(exc)
        log.error("device run aborted: %s", exc)
    wall = time.perf_counter() - t0
    failed = sorted(set(range(num_batches)) - set(results))
    if error is None:
        link.closed.set()
        try:
            link.send(Frame(MsgType.BYE, 0))
        except ConnectionError:
            pass
        link.drain()
        link.join_receiver()
    else:
        link.closed.set()
    sock.close()
    ratio = link.payload_wire / link.payload_raw if link.payload_raw else 1.0
    lat = [e - s for s, e in zip(start, end)]
    return RunReport(num_batches, lat, start, end, wall, link.bytes_sent, link.bytes_received, ratio,
                     results, failed, error)
