"""Ground-truth evaluator: sequential latency, device energy, LUT lower bound,
pipelined throughput and labeled dataset generation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .design_space import (Architecture, ConfigError, OpKind, Side, SpaceConfig,
                           _draw_kinds, _materialize, _require_valid, comm_volume,
                           derive_mapping, kinds_valid, return_volume,
                           trace_shapes)
from .lut import PerfLUT, analytic_lut, layer_keys
from .profiles import SystemConfig, fixed_power

log = logging.getLogger(__name__)

DEVICE, UPLINK, EDGE, DOWNLINK = 0, 1, 2, 3
RESOURCE_NAMES = ("device", "uplink", "edge", "downlink")


@dataclass(frozen=True)
class LayerCost:
    endpoint: str
    t: float
    e: float
    comm_s: float = 0.0


@dataclass(frozen=True)
class PerfEstimate:
    latency_s: float
    device_energy_j: float
    e_run: float
    e_idle: float
    e_comm: float
    breakdown: tuple[LayerCost, ...]
    comm_total_s: float
    pipelined_throughput_ips: float | None = None

    def to_json(self) -> dict:
        return {"latency_s": self.latency_s, "device_energy_j": self.device_energy_j,
                "e_run": self.e_run, "e_idle": self.e_idle, "e_comm": self.e_comm,
                "comm_total_s": self.comm_total_s,
                "pipelined_throughput_ips": self.pipelined_throughput_ips}


@dataclass(frozen=True)
class Task:
    resource: int
    duration: float
    layers: tuple[int, ...]


def _check_sys(sys: SystemConfig) -> None:
    if not sys.net.bandwidth_bps > 0:
        raise ConfigError("zero bandwidth")


def _plan(arch: Architecture, sys: SystemConfig, lut: PerfLUT, lower_bound: bool = False):
    """Tasks in execution order plus per-layer costs.

    Consecutive compute layers on one side form a single task; each
    Communicate is a link task; a trailing edge segment adds an implicit
    result transfer on the downlink. The lower bound drops every per-message
    overhead.
    """
    _require_valid(arch)
    _check_sys(sys)
    mapping = derive_mapping(arch)
    trace = trace_shapes(arch)
    keys = layer_keys(arch)
    net = sys.net
    tasks: list[Task] = []
    costs: list[LayerCost] = []
    seg_res, seg_t, seg_layers = None, 0.0, []
    idle = sys.device.idle_power

    def flush():
        nonlocal seg_res, seg_t, seg_layers
        if seg_res is not None:
            tasks.append(Task(seg_res, seg_t, tuple(seg_layers)))
        seg_res, seg_t, seg_layers = None, 0.0, []

    for i, layer in enumerate(arch.layers):
        side = mapping.side_per_layer[i]
        if layer.op is OpKind.COMMUNICATE:
            flush()
            vol = comm_volume(arch, i, trace)
            ct = net.raw_time(vol * net.compression_ratio_estimate) if lower_bound else net.wire_time(vol)
            tasks.append(Task(UPLINK if side is Side.DEVICE else DOWNLINK, ct, (i,)))
            costs.append(LayerCost("link", 0.0, sys.device.comm_power * ct, ct))
            continue
        op, n, f, p = keys[i]
        t = lut.latency(op, n, f, p, side.value)
        res = DEVICE if side is Side.DEVICE else EDGE
        if seg_res != res:
            flush()
            seg_res = res
        seg_t += t
        seg_layers.append(i)
        e = sys.device.power(op, f) * t if side is Side.DEVICE else idle * t
        costs.append(LayerCost(side.value, t, e))
    flush()
    if mapping.implicit_return:
        rv = return_volume(arch, trace)
        rt = net.raw_time(rv * net.compression_ratio_estimate) if lower_bound else net.wire_time(rv)
        tasks.append(Task(DOWNLINK, rt, ()))
    return tasks, costs, mapping


def _default_lut(sys: SystemConfig, lut: PerfLUT | None) -> PerfLUT:
    return lut if lut is not None else analytic_lut(sys)


def simulate(arch: Architecture, sys: SystemConfig, lut: PerfLUT | None = None,
             pipeline_batches: int = 0) -> PerfEstimate:
    """Sequential end-to-end latency and device energy of one inference."""
    lut = _default_lut(sys, lut)
    tasks, costs, _ = _plan(arch, sys, lut)
    latency = 0.0
    for task in tasks:
        latency += task.duration
    comm = sum(t.duration for t in tasks if t.resource in (UPLINK, DOWNLINK))
    e_run = sum(c.e for c in costs if c.endpoint == "device")
    edge_busy = sum(t.duration for t in tasks if t.resource == EDGE)
    e_idle = sys.device.idle_power * edge_busy
    e_comm = sys.device.comm_power * comm
    tp = None
    if pipeline_batches:
        tp = _pipeline_from_tasks(tasks, pipeline_batches, 2)[0]
    return PerfEstimate(latency, e_run + e_idle + e_comm, e_run, e_idle, e_comm,
                        tuple(costs), comm, tp)


def lut_estimate(arch: Architecture, sys: SystemConfig, lut: PerfLUT | None = None) -> float:
    """Sum of LUT op latencies plus transfer times without the per-message
    overhead; never above ``simulate``."""
    lut = _default_lut(sys, lut)
    tasks, _, _ = _plan(arch, sys, lut, lower_bound=True)
    total = 0.0
    for task in tasks:
        total += task.duration
    return total


def fixed_power_energy(arch: Architecture, sys: SystemConfig, lut: PerfLUT | None = None,
                       run_power: float | None = None) -> float:
    """Traditional estimate with one constant run power for every device op."""
    est = simulate(arch, sys, lut)
    p = fixed_power(sys.device) if run_power is None else run_power
    device_t = sum(c.t for c in est.breakdown if c.endpoint == "device")
    return p * device_t + est.e_idle + est.e_comm


def pipeline_tasks(arch: Architecture, sys: SystemConfig, lut: PerfLUT | None = None) -> list[Task]:
    return _plan(arch, sys, _default_lut(sys, lut))[0]


def _pipeline_from_tasks(tasks: list[Task], num_batches: int, depth: int):
    if num_batches < 1:
        raise ConfigError("num_batches must be >= 1")
    if depth < 1:
        raise ConfigError("pipeline depth must be >= 1")
    durations = np.array([t.duration for t in tasks], dtype=np.float64)
    resources = np.array([t.resource for t in tasks], dtype=np.int64)
    start, end = kernels.schedule(durations, resources, num_batches, depth, 4)
    makespan = float(end[:, -1].max())
    return num_batches / makespan, makespan, start, end


@dataclass(frozen=True)
class PipelineResult:
    throughput_ips: float
    makespan_s: float
    start: np.ndarray
    end: np.ndarray


def simulate_pipeline(arch: Architecture, sys: SystemConfig, num_batches: int, depth: int = 2,
                      lut: PerfLUT | None = None) -> PipelineResult:
    """Multi-batch makespan over device | uplink | edge | downlink resources
    with at most ``depth`` batches in flight."""
    tasks = pipeline_tasks(arch, sys, lut)
    tp, makespan, start, end = _pipeline_from_tasks(tasks, num_batches, depth)
    return PipelineResult(tp, makespan, start, end)


# --- datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    arch: Architecture
    latency_s: float
    energy_j: float
    split: str = "train"

    def to_json(self, sys_fp: str) -> dict:
        return {"arch": self.arch.to_json(), "latency_s": self.latency_s, "energy_j": self.energy_j,
                "sys": sys_fp, "split": self.split}


class RejectionError(RuntimeError):
    pass


def sample_valid_checked(rng: np.random.Generator, space: SpaceConfig, window: int = 10_000,
                         max_reject_rate: float = 0.999) -> Architecture:
    draws = 0
    while True:
        kinds = _draw_kinds(rng, space)
        draws += 1
        if kinds_valid(kinds):
            return _materialize(rng, space, kinds)
        if draws >= window and (draws - 1) / draws > max_reject_rate:
            raise RejectionError(f"rejected {draws - 1} of {draws} draws (> {max_reject_rate:.1%}); "
                                 f"space={space.to_json()}")


def generate_dataset(space: SpaceConfig, sys: SystemConfig, n_samples: int, seed: int,
                     lut: PerfLUT | None = None, train_frac: float = 0.7) -> list[Record]:
    """Simulator-labeled valid architectures with a seeded 70/30 split."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    lut = _default_lut(sys, lut)
    archs = [sample_valid_checked(rng, space) for _ in range(n_samples)]
    order = np.random.default_rng([seed, 1]).permutation(n_samples)
    n_train = int(round(train_frac * n_samples)) if n_samples > 1 else 1
    train = set(order[:n_train].tolist())
    out = []
    for i, arch in enumerate(archs):
        est = simulate(arch, sys, lut)
        out.append(Record(arch, est.latency_s, est.device_energy_j, "train" if i in train else "val"))
    return out


def split(records: Iterable[Record]) -> tuple[list[Record], list[Record]]:
    records = list(records)
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "val"]


def dumps_dataset(records: Iterable[Record], sys: SystemConfig) -> str:
    fp = sys.fingerprint()
    return "".join(json.dumps(r.to_json(fp), sort_keys=True, separators=(",", ":")) + "\n"
                   for r in records)


def write_dataset(path: str | Path, records: Iterable[Record], sys: SystemConfig) -> str:
    text = dumps_dataset(records, sys)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_dataset(path: str | Path) -> list[Record]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if not d["latency_s"] > 0 or not d["energy_j"] > 0:
            raise ConfigError(f"non-positive label in {path}")
        out.append(Record(Architecture.from_json(d["arch"]), float(d["latency_s"]),
                          float(d["energy_j"]), d.get("split", "train")))
    return out


def dataset_fingerprint(records: Iterable[Record]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.arch.dumps()}|{r.latency_s!r}|{r.energy_j!r}|{r.split}\n".encode())
    return h.hexdigest()[:16]
