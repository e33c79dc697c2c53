"""Architecture graphs and the enhanced node features fed to the predictors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design_space import (OP_KINDS, Architecture, Mapping, OpKind, Side, _require_valid,
                           comm_volume, derive_mapping, return_volume, trace_shapes)
from .lut import PerfLUT, layer_keys
from .profiles import NetworkModel, SystemConfig

GLOBAL_TYPE = len(OP_KINDS)
NUM_TYPES = GLOBAL_TYPE + 1
FEATURE_WIDTH = NUM_TYPES + 1
_TYPE_INDEX = {k: i for i, k in enumerate(OP_KINDS)}


@dataclass(frozen=True)
class ArchGraph:
    """Op nodes in layer order followed by one global node."""

    node_types: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def global_node(self) -> int:
        return self.num_nodes - 1

    def adjacency(self) -> np.ndarray:
        """``A[dst, src] = 1`` for every directed edge."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int64)
        for src, dst in self.edges:
            a[dst, src] = 1
        return a

    def mean_operator(self) -> np.ndarray:
        """Row-normalized in-neighbor matrix: ``(M @ H)[v]`` is the mean over N(v)."""
        a = self.adjacency().astype(np.float64)
        deg = a.sum(axis=1, keepdims=True)
        return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)

    def onehot(self) -> np.ndarray:
        x = np.zeros((self.num_nodes, NUM_TYPES))
        x[np.arange(self.num_nodes), list(self.node_types)] = 1.0
        return x

    def to_dot(self, labels: list[str] | None = None) -> str:
        lines = ["digraph arch {"]
        for i, t in enumerate(self.node_types):
            name = "global" if t == GLOBAL_TYPE else OP_KINDS[t].value
            label = labels[i] if labels else name
            lines.append(f'  n{i} [label="{i}: {label}"];')
        for src, dst in self.edges:
            lines.append(f"  n{src} -> n{dst};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_graph(arch: Architecture, mapping: Mapping | None = None) -> ArchGraph:
    """Chain edges, a self-loop on every node, and the global node linked both ways."""
    _require_valid(arch)
    L = len(arch)
    g = L
    types = tuple(_TYPE_INDEX[layer.op] for layer in arch.layers) + (GLOBAL_TYPE,)
    edges = [(i, i + 1) for i in range(L - 1)]
    edges += [(i, i) for i in range(L + 1)]
    for i in range(L):
        edges.append((g, i))
        edges.append((i, g))
    return ArchGraph(types, tuple(edges))


def _raw_latency_perf(arch: Architecture, mapping: Mapping, lut: PerfLUT, net: NetworkModel) -> np.ndarray:
    keys = layer_keys(arch)
    trace = trace_shapes(arch)
    out = np.zeros(len(arch))
    for i, layer in enumerate(arch.layers):
        if layer.op is OpKind.COMMUNICATE:
            out[i] = net.raw_time(comm_volume(arch, i, trace))
        else:
            op, n, f, p = keys[i]
            out[i] = lut.latency(op, n, f, p, mapping.side_per_layer[i].value)
    return out


def _raw_energy_perf(arch: Architecture, mapping: Mapping, lut: PerfLUT, sys: SystemConfig) -> np.ndarray:
    keys = layer_keys(arch)
    trace = trace_shapes(arch)
    out = np.zeros(len(arch))
    for i, layer in enumerate(arch.layers):
        if layer.op is OpKind.COMMUNICATE:
            out[i] = sys.device.comm_power * sys.net.raw_time(comm_volume(arch, i, trace))
            continue
        op, n, f, p = keys[i]
        if mapping.side_per_layer[i] is Side.DEVICE:
            out[i] = lut.lookup(op, n, f, p, "device")[1]
        else:
            # device sits idle while the edge runs this op
            out[i] = sys.device.idle_power * lut.latency(op, n, f, p, "edge")
    return out


def _assemble(graph: ArchGraph, perf: np.ndarray, global_perf: float = 0.0) -> np.ndarray:
    x = np.zeros((graph.num_nodes, FEATURE_WIDTH))
    x[:, :NUM_TYPES] = graph.onehot()
    x[:-1, NUM_TYPES] = perf
    x[-1, NUM_TYPES] = global_perf
    return x


def return_time(arch: Architecture, mapping: Mapping, net: NetworkModel) -> float:
    """Raw transfer time of the implicit result return, 0 when the arch ends on the device."""
    return net.raw_time(return_volume(arch)) if mapping.implicit_return else 0.0


# The implicit return has no node of its own, so without the global slot an arch
# ending on the edge looks exactly like one that does not pay for the way back.

def latency_features(graph: ArchGraph, arch: Architecture, mapping: Mapping, lut: PerfLUT,
                     net: NetworkModel) -> np.ndarray:
    """One-hot type ⊕ z-scored LUT latency on the mapped endpoint.

    The global node carries the z-scored implicit-return time, or 0 without one.
    """
    raw = _raw_latency_perf(arch, mapping, lut, net)
    stats = lut.latency_stats
    ret = return_time(arch, mapping, net)
    return _assemble(graph, stats.normalize(raw), float(stats.normalize(ret)) if ret else 0.0)


def energy_features(graph: ArchGraph, arch: Architecture, mapping: Mapping, lut: PerfLUT,
                    sys: SystemConfig) -> np.ndarray:
    """One-hot type ⊕ z-scored device-side energy of each node.

    The global node carries the device's comm energy for the implicit return, or 0.
    """
    raw = _raw_energy_perf(arch, mapping, lut, sys)
    stats = lut.energy_stats
    ret = return_time(arch, mapping, sys.net)
    return _assemble(graph, stats.normalize(raw),
                     float(stats.normalize(sys.device.comm_power * ret)) if ret else 0.0)


def onehot_features(graph: ArchGraph) -> np.ndarray:
    return graph.onehot()


def featurize(arch: Architecture, metric: str, lut: PerfLUT, sys: SystemConfig,
              enhanced: bool = True) -> tuple[ArchGraph, np.ndarray]:
    mapping = derive_mapping(arch)
    graph = build_graph(arch, mapping)
    if not enhanced:
        return graph, onehot_features(graph)
    if metric == "latency":
        return graph, latency_features(graph, arch, mapping, lut, sys.net)
    if metric == "energy":
        return graph, energy_features(graph, arch, mapping, lut, sys)
    raise ValueError(f"unknown metric {metric!r}")
