"""Operation kernels over synthetic point clouds."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import kernels
from ..design_space import Architecture, Layer, OpKind


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class OpState:
    """What flows between layers: features, the active KNN graph and the skip source."""

    x: np.ndarray
    nbr: np.ndarray | None = None
    skip: np.ndarray | None = None


def synthetic_input(shape: tuple[int, int], seed: int, batch_id: int) -> np.ndarray:
    return np.random.default_rng([seed, batch_id, 0]).standard_normal(shape).astype(np.float32)


def combine_weight(layer_idx: int, f_in: int, f_out: int, seed: int, test_mode: bool = False) -> np.ndarray:
    """Fixed per-layer weight; identity (rectangular if needed) in test mode."""
    if test_mode:
        return np.eye(f_in, f_out, dtype=np.float32)
    rng = np.random.default_rng([seed, layer_idx, 1])
    return (rng.standard_normal((f_in, f_out)) / np.sqrt(f_in)).astype(np.float32)


class WeightBank:
    """Combine weights of one architecture, built lazily and shared read-only."""

    def __init__(self, arch: Architecture, seed: int, test_mode: bool = False):
        self.arch, self.seed, self.test_mode = arch, seed, test_mode
        self._w: dict[int, np.ndarray] = {}

    def get(self, layer_idx: int, f_in: int) -> np.ndarray:
        w = self._w.get(layer_idx)
        if w is None:
            f_out = self.arch.layers[layer_idx].out_dim
            w = self._w[layer_idx] = combine_weight(layer_idx, f_in, f_out, self.seed, self.test_mode)
        return w


def run_kernel(layer: Layer, state: OpState, weight: np.ndarray | None = None) -> OpState:
    x = state.x
    if x.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {x.shape}")
    op = layer.op
    if op is OpKind.SAMPLE:
        n = x.shape[0]
        if n < 2:
            raise ShapeError("sample needs at least 2 points")
        return replace(state, nbr=kernels.knn(x, min(int(layer.k), n - 1)))
    if op is OpKind.AGGREGATE:
        if state.nbr is None:
            raise ShapeError("aggregate without an active graph")
        if state.nbr.shape[0] != x.shape[0]:
            raise ShapeError(f"graph covers {state.nbr.shape[0]} nodes, features {x.shape[0]}")
        return replace(state, x=kernels.aggregate_rows(x, state.nbr, kernels.AGGR_CODES[layer.aggr]))
    if op is OpKind.COMBINE:
        if weight is None or weight.shape[0] != x.shape[1]:
            raise ShapeError(f"combine weight does not match input width {x.shape[1]}")
        return replace(state, x=x @ weight, skip=x)
    if op is OpKind.GLOBAL_POOLING:
        return OpState(x.max(axis=0, keepdims=True))
    if op is OpKind.CONNECT:
        if state.skip is None or state.skip.shape[0] != x.shape[0]:
            raise ShapeError("connect without a matching skip source")
        return replace(state, x=np.concatenate([x, state.skip], axis=1))
    raise ShapeError(f"{op.value} is not a compute operation")


def run_segment(arch: Architecture, start: int, stop: int, state: OpState, bank: WeightBank) -> OpState:
    for i in range(start, stop):
        layer = arch.layers[i]
        w = bank.get(i, state.x.shape[1]) if layer.op is OpKind.COMBINE else None
        state = run_kernel(layer, state, w)
    return state


def run_local(arch: Architecture, x: np.ndarray, seed: int, test_mode: bool = False) -> np.ndarray:
    """Whole architecture in-process, Communicate layers as no-ops."""
    bank = WeightBank(arch, seed, test_mode)
    state = OpState(x)
    for i, layer in enumerate(arch.layers):
        if layer.op is OpKind.COMMUNICATE:
            continue
        state = run_segment(arch, i, i + 1, state, bank)
    return state.x
