"""Micro-benchmarks that populate a LUT from measured kernel timings,
plus a loopback calibration of the link model."""
from __future__ import annotations

import hashlib
import platform
import socket
import statistics
import threading
import time
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..design_space import Layer, OpKind
from ..lut import ConfigBuckets, PerfLUT, build_lut
from ..profiles import NetworkModel, SystemConfig
from .ops import OpState, combine_weight, run_kernel
from .wire import Frame, MsgType, Pacer, encode_frame, read_frame, pack_tensor

TIMER_RESOLUTION = time.get_clock_info("perf_counter").resolution


def machine_fingerprint() -> str:
    parts = [platform.machine(), platform.processor(), platform.python_version(), np.__version__,
             str(kernels.USE_NUMBA)]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def _layer_for(op: OpKind, p: int) -> Layer:
    if op is OpKind.SAMPLE:
        return Layer(op, k=p)
    if op is OpKind.AGGREGATE:
        return Layer(op, aggr="max")
    if op is OpKind.COMBINE:
        return Layer(op, out_dim=p)
    return Layer(op)


def _inputs(op: OpKind, n: int, f: int, p: int, rng: np.random.Generator):
    x = rng.standard_normal((n, f)).astype(np.float32)
    nbr = skip = w = None
    if op is OpKind.AGGREGATE:
        nbr = rng.integers(0, n, size=(n, max(p, 1)))
    elif op is OpKind.CONNECT:
        skip = rng.standard_normal((n, p)).astype(np.float32)
    elif op is OpKind.COMBINE:
        w = combine_weight(0, f, p, 0)
    return OpState(x, nbr, skip), w


def time_op(op: OpKind, n: int, f: int, p: int, repetitions: int = 5, warmup: int = 1,
            seed: int = 0) -> tuple[float, bool]:
    """Median wall time of ``run_kernel`` and whether it is trustworthy
    (timer resolution at most 1% of the measurement)."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    layer = _layer_for(op, p)
    state, w = _inputs(OpKind(op), n, f, p, np.random.default_rng([seed, n, f, p]))
    for _ in range(warmup):
        run_kernel(layer, state, w)
    times = []
    for _ in range(repetitions):
        t = time.perf_counter()
        run_kernel(layer, state, w)
        times.append(time.perf_counter() - t)
    med = statistics.median(times)
    med = max(med, TIMER_RESOLUTION)
    return med, TIMER_RESOLUTION <= 0.01 * med


@dataclass
class ProfileResult:
    lut: PerfLUT
    machine: str
    low_confidence: list[tuple]
    timings: dict


def profile_endpoint(buckets: ConfigBuckets, sys: SystemConfig, repetitions: int = 5, warmup: int = 1,
                     seed: int = 0) -> ProfileResult:
    """Measure every bucket on this machine and use the timings for both endpoints.

    Energies still come from the system's run-power model applied to the
    measured latencies.
    """
    timings: dict = {}
    low = []
    for key in buckets.keys():
        op, n, f, p = key
        t, ok = time_op(op, n, f, p, repetitions, warmup, seed)
        timings[key] = t
        if not ok:
            low.append(key)
    machine = machine_fingerprint()
    lut = build_lut(sys, buckets, latency_fn=lambda ep, key: timings[key], fingerprint=f"measured-{machine}")
    return ProfileResult(lut, machine, low, timings)


def calibrate_network(bandwidth_bps: float, sizes=(1024, 262144), repetitions: int = 5,
                      compression_ratio: float = 1.0) -> NetworkModel:
    """Per-message overhead fitted from paced transfers over a loopback socket pair.

    The overhead is the mean excess of measured one-way frame time over the
    pure serialization time ``bytes * 8 / bandwidth``.
    """
    a, b = socket.socketpair()
    excess = []
    try:
        for size in sizes:
            x = np.zeros((size // 4, 1), dtype=np.float32)
            data = encode_frame(Frame(MsgType.TENSOR, 0, pack_tensor(0, x)), "identity")
            for _ in range(repetitions):
                pacer = Pacer(bandwidth_bps)
                done = threading.Event()

                def reader():
                    read_frame(b)
                    done.set()

                th = threading.Thread(target=reader)
                th.start()
                t = time.perf_counter()
                pacer.send(a, data)
                done.wait()
                dt = time.perf_counter() - t
                th.join()
                excess.append(max(dt - len(data) * 8.0 / bandwidth_bps, 0.0))
    finally:
        a.close()
        b.close()
    return NetworkModel(bandwidth_bps, float(np.mean(excess)), compression_ratio)
