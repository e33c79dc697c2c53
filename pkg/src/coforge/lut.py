"""Per-operation latency/energy lookup table with z-score statistics.

Each (op, endpoint) pair owns a regular grid over (N, F, P) where P is the
op's function parameter (k for sample/aggregate, F_out for combine, skip
width for connect, 1 for pooling). Off-grid queries interpolate log(value)
multilinearly in (log N, log F, log P), which is exact for power laws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .design_space import (Architecture, ConfigError, OpKind, SpaceConfig,
                           trace_shapes)
from .profiles import COMPUTE_OPS, EndpointProfile, SystemConfig

ENDPOINTS = ("device", "edge")


def op_param(op: OpKind, layer, skip_width: int) -> int:
    if op in (OpKind.SAMPLE, OpKind.AGGREGATE):
        return 0  # filled from the active k by the caller
    if op is OpKind.COMBINE:
        return int(layer.out_dim)
    if op is OpKind.CONNECT:
        return int(skip_width)
    return 1


def layer_keys(arch: Architecture) -> list[tuple[OpKind, int, int, int] | None]:
    """LUT key per layer, None for Communicate."""
    trace = trace_shapes(arch)
    keys: list[tuple[OpKind, int, int, int] | None] = []
    for i, layer in enumerate(arch.layers):
        s_in = trace.inputs[i]
        op = layer.op
        if op is OpKind.COMMUNICATE:
            keys.append(None)
            continue
        if op is OpKind.SAMPLE:
            p = trace.outputs[i].active_k
        elif op is OpKind.AGGREGATE:
            p = s_in.active_k
        else:
            p = op_param(op, layer, trace.skip_widths[i])
        keys.append((op, s_in.num_nodes, s_in.feature_dim, p))
    return keys


@dataclass(frozen=True)
class ConfigBuckets:
    """Grid axes per op: {op: (n_values, f_values, p_values)}."""

    axes: dict

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("empty bucket grid")
        for op, (ns, fs, ps) in self.axes.items():
            if not ns or not fs or not ps:
                raise ConfigError(f"empty bucket axis for {op}")

    def count(self) -> int:
        return sum(len(ns) * len(fs) * len(ps) for ns, fs, ps in self.axes.values())

    def keys(self) -> Iterable[tuple[OpKind, int, int, int]]:
        for op, (ns, fs, ps) in self.axes.items():
            for n in ns:
                for f in fs:
                    for p in ps:
                        yield op, n, f, p

    @classmethod
    def grid(cls, n_values=(1, 128, 1024), f_values=(3, 64, 128, 256, 300), k_values=(20,),
             out_values=(64, 128, 256), skip_values=(64, 128), ops=COMPUTE_OPS) -> "ConfigBuckets":
        params = {OpKind.SAMPLE: k_values, OpKind.AGGREGATE: k_values, OpKind.COMBINE: out_values,
                  OpKind.CONNECT: skip_values, OpKind.GLOBAL_POOLING: (1,)}
        return cls({OpKind(op): (tuple(sorted(n_values)), tuple(sorted(f_values)),
                                 tuple(sorted(params[OpKind(op)]))) for op in ops})

    @classmethod
    def from_keys(cls, keys: Iterable[tuple[OpKind, int, int, int]]) -> "ConfigBuckets":
        acc: dict = {}
        for op, n, f, p in keys:
            ns, fs, ps = acc.setdefault(op, (set(), set(), set()))
            ns.add(n), fs.add(f), ps.add(p)
        return cls({op: (tuple(sorted(a)), tuple(sorted(b)), tuple(sorted(c)))
                    for op, (a, b, c) in sorted(acc.items(), key=lambda kv: COMPUTE_OPS.index(kv[0]))})


def reachable_keys(space: SpaceConfig) -> set[tuple[OpKind, int, int, int]]:
    """Every LUT key any layer of the space can query (validity ignored where cheap).

    Dynamic programming over slots with state (N, F, active_k, skip width).
    """
    n0, f0 = space.input_shape
    states = {(n0, f0, 0, 0)}
    out: set = set()
    for i in range(space.max_layers):
        nxt = set()
        for n, f, k, skip in states:
            for kind in space.slot_kinds(i):
                for layer in space.slot_layers(i, kind):
                    op = layer.op
                    if op is OpKind.SAMPLE:
                        if n == 1:
                            continue
                        kk = min(int(layer.k), n - 1)
                        out.add((op, n, f, kk))
                        nxt.add((n, f, kk, skip))
                    elif op is OpKind.AGGREGATE:
                        if k:
                            out.add((op, n, f, k))
                        nxt.add((n, f, k, skip))
                    elif op is OpKind.COMBINE:
                        out.add((op, n, f, int(layer.out_dim)))
                        nxt.add((n, int(layer.out_dim), k, f))
                    elif op is OpKind.CONNECT:
                        if skip:
                            out.add((op, n, f, skip))
                            nxt.add((n, f + skip, k, skip))
                    elif op is OpKind.GLOBAL_POOLING:
                        out.add((op, n, f, 1))
                        nxt.add((1, f, 0, 0))
                    else:
                        nxt.add((n, f, k, skip))
        states = nxt
    return out


def space_buckets(space: SpaceConfig) -> ConfigBuckets:
    """Reachable keys plus a k = 1 plane for Aggregate, so the k axis always
    has two points and scaled-down k values interpolate instead of clamping."""
    keys = reachable_keys(space)
    keys |= {(op, n, f, 1) for op, n, f, _ in keys if op is OpKind.AGGREGATE}
    return ConfigBuckets.from_keys(keys)


def keys_of(archs: Iterable[Architecture]) -> set:
    return {k for a in archs for k in layer_keys(a) if k is not None}


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean


def _stats(values: np.ndarray) -> NormStats:
    mean = float(np.mean(values))
    std = float(np.std(values))
    return NormStats(mean, std if std > 0 else 1.0)


@dataclass
class _Grid:
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    latency: np.ndarray
    energy: np.ndarray
    index: tuple[dict, dict, dict] = field(init=False)

    def __post_init__(self):
        self.index = tuple({int(v): i for i, v in enumerate(ax)} for ax in self.axes)


def _log(v: float) -> float:
    return math.log(max(float(v), 1.0))


def _bracket(ax: np.ndarray, q: float) -> tuple[int, int, float]:
    """Indices (i, j) and weight of j for log-linear interpolation along an axis."""
    if len(ax) == 1:
        return 0, 0, 0.0
    lq = _log(q)
    j = int(np.searchsorted(ax, q))
    j = min(max(j, 1), len(ax) - 1)
    i = j - 1
    la, lb = _log(ax[i]), _log(ax[j])
    w = 0.0 if lb == la else (lq - la) / (lb - la)
    return i, j, w


class PerfLUT:
    """Latency/energy table for both endpoints of one system."""

    def __init__(self, grids: dict, fingerprint: str = "", source: str = "analytic"):
        self.grids = grids
        self.fingerprint = fingerprint
        self.source = source
        lat = np.concatenate([g.latency.ravel() for g in grids.values()])
        en = np.concatenate([g.energy.ravel() for g in grids.values()])
        self.latency_stats = _stats(lat)
        self.energy_stats = _stats(en)

    def __len__(self) -> int:
        return sum(g.latency.size for g in self.grids.values())

    def entries(self):
        for (op, ep), g in self.grids.items():
            ns, fs, ps = g.axes
            for a, n in enumerate(ns):
                for b, f in enumerate(fs):
                    for c, p in enumerate(ps):
                        yield (op, int(n), int(f), int(p), ep), float(g.latency[a, b, c]), float(g.energy[a, b, c])

    def lookup(self, op: OpKind, n: int, f: int, p: int, endpoint: str) -> tuple[float, float]:
        """(latency_s, energy_j) of ``op`` on ``endpoint``."""
        endpoint = getattr(endpoint, "value", endpoint)
        if endpoint not in ENDPOINTS:
            raise ConfigError(f"unknown endpoint {endpoint!r}")
        g = self.grids.get((OpKind(op), endpoint))
        if g is None:
            raise KeyError(f"no LUT entries for {OpKind(op).value} on {endpoint}")
        ia, ib, ic = g.index
        if n in ia and f in ib and p in ic:
            a, b, c = ia[n], ib[f], ic[p]
            return float(g.latency[a, b, c]), float(g.energy[a, b, c])
        brackets = [_bracket(ax, q) for ax, q in zip(g.axes, (n, f, p))]
        out = []
        for table in (g.latency, g.energy):
            acc = 0.0
            for corner in range(8):
                idx, w = [], 1.0
                for d in range(3):
                    i, j, wd = brackets[d]
                    if corner >> d & 1:
                        idx.append(j)
                        w *= wd
                    else:
                        idx.append(i)
                        w *= 1.0 - wd
                if w != 0.0:
                    acc += w * math.log(table[tuple(idx)])
            out.append(math.exp(acc))
        return out[0], out[1]

    def latency(self, op, n, f, p, endpoint) -> float:
        return self.lookup(op, n, f, p, endpoint)[0]

    def to_json(self) -> dict:
        return {"fingerprint": self.fingerprint, "source": self.source,
                "entries": [[op.value, n, f, p, ep, lat, en] for (op, n, f, p, ep), lat, en in self.entries()]}

    @classmethod
    def from_json(cls, d: dict) -> "PerfLUT":
        rows = [(OpKind(r[0]), int(r[1]), int(r[2]), int(r[3]), r[4], float(r[5]), float(r[6]))
                for r in d["entries"]]
        return cls.from_rows(rows, d.get("fingerprint", ""), d.get("source", "analytic"))

    @classmethod
    def from_rows(cls, rows, fingerprint: str = "", source: str = "analytic") -> "PerfLUT":
        by: dict = {}
        for op, n, f, p, ep, lat, en in rows:
            by.setdefault((op, ep), []).append((n, f, p, lat, en))
        grids = {}
        for key, items in by.items():
            axes = tuple(np.array(sorted({it[d] for it in items}), dtype=np.int64) for d in range(3))
            shape = tuple(len(a) for a in axes)
            lat = np.full(shape, np.nan)
            en = np.full(shape, np.nan)
            idx = [{int(v): i for i, v in enumerate(a)} for a in axes]
            for n, f, p, la, e in items:
                lat[idx[0][n], idx[1][f], idx[2][p]] = la
                en[idx[0][n], idx[1][f], idx[2][p]] = e
            if np.isnan(lat).any():
                raise ConfigError(f"LUT grid for {key[0].value}/{key[1]} is not a full product grid")
            grids[key] = _Grid(axes, lat, en)
        return cls(grids, fingerprint, source)


def build_lut(profiles: dict[str, EndpointProfile] | SystemConfig, buckets: ConfigBuckets,
              latency_fn: Callable[[str, tuple], float] | None = None,
              fingerprint: str = "") -> PerfLUT:
    """Populate a LUT over ``buckets`` for both endpoints.

    ``latency_fn(endpoint, key)`` overrides the analytic cost model, e.g. with
    measured timings; energies always use the endpoint's run-power model.
    """
    if isinstance(profiles, SystemConfig):
        fingerprint = fingerprint or profiles.profile_fingerprint()
        profiles = {"device": profiles.device, "edge": profiles.edge}
    if buckets.count() == 0:
        raise ConfigError("empty bucket grid")
    rows = []
    for ep in ENDPOINTS:
        prof = profiles[ep]
        for key in buckets.keys():
            op, n, f, p = key
            lat = latency_fn(ep, key) if latency_fn is not None else prof.op_time(op, n, f, p)
            if not lat > 0:
                raise ConfigError(f"non-positive latency for {op.value} {key[1:]} on {ep}")
            rows.append((op, n, f, p, ep, float(lat), float(lat) * prof.power(op, f)))
    return PerfLUT.from_rows(rows, fingerprint, "analytic" if latency_fn is None else "measured")


_CACHE: dict = {}


def analytic_lut(sys: SystemConfig, space: SpaceConfig | None = None) -> PerfLUT:
    """Cached analytic LUT over the reachable buckets of ``space``."""
    from .design_space import DEFAULT_SPACE
    space = space or DEFAULT_SPACE
    key = (sys.profile_fingerprint(), repr(space.to_json()))
    lut = _CACHE.get(key)
    if lut is None:
        lut = _CACHE[key] = build_lut(sys, space_buckets(space))
    return lut

