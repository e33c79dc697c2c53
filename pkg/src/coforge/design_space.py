"""Unified operation vocabulary, sampling, validity rules and device-edge mapping.

A communicate layer is an ordinary operation in this vocabulary: every
occurrence toggles the execution side, so an architecture carries its own
device/edge mapping.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

DTYPE_BYTES = 4
INDEX_BYTES = 4
# magic(4) + version(1) + type(1) + batch_id(4) + flags(1) + payload_len(4)
HEADER_BYTES = 15


class ConfigError(ValueError):
    pass


class InvalidArchitecture(ValueError):
    pass


class OpKind(str, enum.Enum):
    SAMPLE = "sample"
    AGGREGATE = "aggregate"
    COMMUNICATE = "communicate"
    COMBINE = "combine"
    GLOBAL_POOLING = "global_pooling"
    CONNECT = "connect"


OP_KINDS: tuple[OpKind, ...] = tuple(OpKind)
AGGR_CHOICES = ("max", "mean", "sum")


class Side(str, enum.Enum):
    DEVICE = "device"
    EDGE = "edge"

    def other(self) -> "Side":
        return Side.EDGE if self is Side.DEVICE else Side.DEVICE


@dataclass(frozen=True)
class Layer:
    op: OpKind
    k: int | None = None
    aggr: str | None = None
    out_dim: int | None = None

    def __post_init__(self):
        op = OpKind(self.op)
        object.__setattr__(self, "op", op)
        if op is OpKind.SAMPLE:
            if self.k is None or int(self.k) < 1:
                raise ConfigError(f"sample needs k >= 1, got {self.k}")
        elif op is OpKind.AGGREGATE:
            if self.aggr not in AGGR_CHOICES:
                raise ConfigError(f"aggregate needs aggr in {AGGR_CHOICES}, got {self.aggr}")
        elif op is OpKind.COMBINE:
            if self.out_dim is None or int(self.out_dim) < 1:
                raise ConfigError(f"combine needs out_dim >= 1, got {self.out_dim}")

    def to_json(self) -> dict:
        d: dict = {"op": self.op.value}
        if self.op is OpKind.SAMPLE:
            d["k"] = int(self.k)
        elif self.op is OpKind.AGGREGATE:
            d["aggr"] = self.aggr
        elif self.op is OpKind.COMBINE:
            d["out_dim"] = int(self.out_dim)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Layer":
        return cls(OpKind(d["op"]), k=d.get("k"), aggr=d.get("aggr"), out_dim=d.get("out_dim"))

    def __str__(self) -> str:
        if self.op is OpKind.SAMPLE:
            return f"Sample(k={self.k})"
        if self.op is OpKind.AGGREGATE:
            return f"Aggregate({self.aggr})"
        if self.op is OpKind.COMBINE:
            return f"Combine({self.out_dim})"
        return {OpKind.COMMUNICATE: "Communicate", OpKind.GLOBAL_POOLING: "GlobalPooling",
                OpKind.CONNECT: "Connect"}[self.op]


def sample(k: int = 20) -> Layer:
    return Layer(OpKind.SAMPLE, k=k)


def aggregate(aggr: str = "max") -> Layer:
    return Layer(OpKind.AGGREGATE, aggr=aggr)


def combine(out_dim: int) -> Layer:
    return Layer(OpKind.COMBINE, out_dim=out_dim)


COMMUNICATE = Layer(OpKind.COMMUNICATE)
GLOBAL_POOLING = Layer(OpKind.GLOBAL_POOLING)
CONNECT = Layer(OpKind.CONNECT)


@dataclass(frozen=True)
class Architecture:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int] = (1024, 3)
    dtype_bytes: int = DTYPE_BYTES

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", (int(self.input_shape[0]), int(self.input_shape[1])))
        if not self.layers:
            raise ConfigError("architecture needs at least one layer")

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def kinds(self) -> tuple[OpKind, ...]:
        return tuple(layer.op for layer in self.layers)

    def to_json(self) -> dict:
        return {"layers": [layer.to_json() for layer in self.layers],
                "input": list(self.input_shape)}

    def dumps(self) -> str:
        """Canonical JSON text; identical architectures give identical bytes."""
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        return cls(tuple(Layer.from_json(x) for x in d["layers"]), tuple(d.get("input", (1024, 3))))

    @classmethod
    def loads(cls, text: str) -> "Architecture":
        return cls.from_json(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def __str__(self) -> str:
        return "[" + ", ".join(str(x) for x in self.layers) + "]"


@dataclass(frozen=True)
class SpaceConfig:
    """Layer-wise design space.

    ``layer_out_dims`` pins the Combine width of every slot (the supernet's
    predefined function setting); when None, widths are drawn from
    ``out_dim_choices``.
    """

    max_layers: int = 12
    min_layers: int | None = None
    kinds: tuple[OpKind, ...] = OP_KINDS
    layer_kinds: tuple[tuple[OpKind, ...], ...] | None = None
    k_choices: tuple[int, ...] = (20,)
    aggr_choices: tuple[str, ...] = ("max",)
    out_dim_choices: tuple[int, ...] = (64,)
    layer_out_dims: tuple[int, ...] | None = None
    input_shape: tuple[int, int] = (1024, 3)

    def __post_init__(self):
        if self.max_layers < 1:
            raise ConfigError("max_layers must be >= 1")
        lo = self.min_layers if self.min_layers is not None else self.max_layers
        if not 1 <= lo <= self.max_layers:
            raise ConfigError(f"min_layers must lie in [1, {self.max_layers}]")
        if not self.kinds:
            raise ConfigError("empty operation vocabulary")
        if self.layer_kinds is not None:
            if len(self.layer_kinds) < self.max_layers or any(not ks for ks in self.layer_kinds):
                raise ConfigError("layer_kinds must give a nonempty vocabulary for every slot")
        if self.layer_out_dims is not None and len(self.layer_out_dims) < self.max_layers:
            raise ConfigError("layer_out_dims must cover every slot")
        if not self.k_choices or not self.aggr_choices or not self.out_dim_choices:
            raise ConfigError("function-setting choices must be nonempty")

    @property
    def lengths(self) -> range:
        lo = self.min_layers if self.min_layers is not None else self.max_layers
        return range(lo, self.max_layers + 1)

    def slot_kinds(self, i: int) -> tuple[OpKind, ...]:
        return tuple(self.layer_kinds[i]) if self.layer_kinds is not None else tuple(self.kinds)

    def slot_layers(self, i: int, kind: OpKind) -> tuple[Layer, ...]:
        """Every concrete layer choice for ``kind`` at slot ``i``."""
        return _slot_layers(self, i, kind)

    def _slot_layers(self, i: int, kind: OpKind) -> list[Layer]:
        if kind is OpKind.SAMPLE:
            return [sample(k) for k in self.k_choices]
        if kind is OpKind.AGGREGATE:
            return [aggregate(a) for a in self.aggr_choices]
        if kind is OpKind.COMBINE:
            if self.layer_out_dims is not None:
                return [combine(self.layer_out_dims[i])]
            return [combine(d) for d in self.out_dim_choices]
        return [Layer(kind)]

    def to_json(self) -> dict:
        return {
            "max_layers": self.max_layers,
            "min_layers": self.min_layers,
            "kinds": [k.value for k in self.kinds],
            "layer_kinds": None if self.layer_kinds is None
            else [[k.value for k in ks] for ks in self.layer_kinds],
            "k_choices": list(self.k_choices),
            "aggr_choices": list(self.aggr_choices),
            "out_dim_choices": list(self.out_dim_choices),
            "layer_out_dims": None if self.layer_out_dims is None else list(self.layer_out_dims),
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpaceConfig":
        lk = d.get("layer_kinds")
        lod = d.get("layer_out_dims")
        return cls(
            max_layers=d["max_layers"],
            min_layers=d.get("min_layers"),
            kinds=tuple(OpKind(k) for k in d.get("kinds", [k.value for k in OP_KINDS])),
            layer_kinds=None if lk is None else tuple(tuple(OpKind(k) for k in ks) for ks in lk),
            k_choices=tuple(d.get("k_choices", (20,))),
            aggr_choices=tuple(d.get("aggr_choices", ("max",))),
            out_dim_choices=tuple(d.get("out_dim_choices", (64,))),
            layer_out_dims=None if lod is None else tuple(lod),
            input_shape=tuple(d.get("input_shape", (1024, 3))),
        )


@functools.lru_cache(maxsize=64)
def _slot_table(space: SpaceConfig) -> tuple[dict, ...]:
    return tuple({kind: tuple(space._slot_layers(i, kind)) for kind in space.slot_kinds(i)}
                 for i in range(space.max_layers))


def _slot_layers(space: SpaceConfig, i: int, kind: OpKind) -> tuple[Layer, ...]:
    return _slot_table(space)[i][kind]


# Combine widths of the 12-slot supernet, following the DGCNN function setting.
DGCNN_OUT_DIMS = (64, 64, 64, 64, 128, 128, 256, 256, 512, 256, 128, 40)
DEFAULT_SPACE = SpaceConfig(max_layers=12, layer_out_dims=DGCNN_OUT_DIMS)


def small_space(num_layers: int = 4, min_layers: int | None = None) -> SpaceConfig:
    """Exhaustively enumerable space used by the optimality checks."""
    return SpaceConfig(max_layers=num_layers, min_layers=min_layers,
                       layer_out_dims=DGCNN_OUT_DIMS[:num_layers] if num_layers <= 12
                       else tuple(64 for _ in range(num_layers)),
                       input_shape=(1024, 3))


def dgcnn_reference(input_shape: tuple[int, int] = (1024, 3)) -> Architecture:
    """Device-only DGCNN-like 12-layer reference used to anchor the default packs."""
    return Architecture(
        (sample(20), aggregate("max"), combine(64),
         sample(20), aggregate("max"), combine(64),
         sample(20), aggregate("max"), combine(128),
         CONNECT, GLOBAL_POOLING, combine(40)),
        input_shape,
    )


def _draw_kinds(rng: np.random.Generator, space: SpaceConfig) -> list[OpKind]:
    lengths = space.lengths
    n = int(lengths[int(rng.integers(len(lengths)))]) if len(lengths) > 1 else lengths[0]
    if space.layer_kinds is None:
        kinds = space.kinds
        return [kinds[j] for j in rng.integers(len(kinds), size=n).tolist()]
    return [space.slot_kinds(i)[int(rng.integers(len(space.slot_kinds(i))))] for i in range(n)]


def _materialize(rng: np.random.Generator, space: SpaceConfig, kinds: Sequence[OpKind]) -> Architecture:
    table = _slot_table(space)
    layers = []
    for i, kind in enumerate(kinds):
        choices = table[i][kind]
        layers.append(choices[int(rng.integers(len(choices)))] if len(choices) > 1 else choices[0])
    return Architecture(tuple(layers), space.input_shape)


def sample_architecture(rng_seed: int | np.random.Generator, space: SpaceConfig = DEFAULT_SPACE) -> Architecture:
    """Draw a uniformly random layer sequence; validity is *not* enforced."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return _materialize(rng, space, _draw_kinds(rng, space))


def enumerate_space(space: SpaceConfig) -> Iterator[Architecture]:
    """Every architecture of the space, valid or not, in a fixed order."""
    for n in space.lengths:
        per_slot = [[layer for kind in space.slot_kinds(i) for layer in space.slot_layers(i, kind)]
                     for i in range(n)]
        for layers in itertools.product(*per_slot):
            yield Architecture(layers, space.input_shape)


@dataclass(frozen=True)
class Violation:
    rule: str
    layer: int
    message: str


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    violated_rules: tuple[Violation, ...] = ()

    @property
    def rules(self) -> set[str]:
        return {v.rule for v in self.violated_rules}


def check_validity(arch: Architecture) -> ValidityReport:
    """Apply rules V1-V6 and report every violation with its layer index.

    V1 no consecutive Communicate; V2 Communicate neither first nor last;
    V3 Aggregate needs an active graph; V4 no Sample/Aggregate after
    GlobalPooling; V5 at least one Combine; V6 Connect needs a skip source:
    a preceding Combine in the same segment with no GlobalPooling between.
    """
    return _violations(arch.kinds)


def _violations(kinds: Sequence[OpKind]) -> ValidityReport:
    out: list[Violation] = []
    L = len(kinds)
    graph_active = False
    pooled = False
    skip_ok = False
    for i, op in enumerate(kinds):
        if op is OpKind.COMMUNICATE:
            if i > 0 and kinds[i - 1] is OpKind.COMMUNICATE:
                out.append(Violation("V1", i, "consecutive communicate"))
            if i == 0:
                out.append(Violation("V2", i, "communicate as first layer"))
            if i == L - 1:
                out.append(Violation("V2", i, "communicate as last layer"))
            skip_ok = False
        elif op is OpKind.SAMPLE:
            if pooled:
                out.append(Violation("V4", i, "sample after global pooling"))
            graph_active = True
        elif op is OpKind.AGGREGATE:
            if not graph_active:
                out.append(Violation("V3", i, "aggregate without an active graph"))
            if pooled:
                out.append(Violation("V4", i, "aggregate after global pooling"))
        elif op is OpKind.GLOBAL_POOLING:
            pooled = True
            graph_active = False
            skip_ok = False
        elif op is OpKind.COMBINE:
            skip_ok = True
        elif op is OpKind.CONNECT:
            if not skip_ok:
                out.append(Violation("V6", i, "connect without a same-segment combine skip source"))
    if OpKind.COMBINE not in kinds:
        out.append(Violation("V5", L - 1, "no combine layer"))
    return ValidityReport(not out, tuple(out))


def is_valid(arch: Architecture) -> bool:
    return _violations(arch.kinds).valid


def kinds_valid(kinds: Sequence[OpKind]) -> bool:
    """Early-exit twin of ``_violations`` for rejection sampling."""
    L = len(kinds)
    graph = pooled = skip = combined = False
    prev = None
    for i, op in enumerate(kinds):
        if op is OpKind.COMMUNICATE:
            if i == 0 or i == L - 1 or prev is OpKind.COMMUNICATE:
                return False
            skip = False
        elif op is OpKind.SAMPLE:
            if pooled:
                return False
            graph = True
        elif op is OpKind.AGGREGATE:
            if not graph or pooled:
                return False
        elif op is OpKind.GLOBAL_POOLING:
            pooled, graph, skip = True, False, False
        elif op is OpKind.COMBINE:
            skip = combined = True
        elif not skip:
            return False
        prev = op
    return combined


def _require_valid(arch: Architecture) -> None:
    report = check_validity(arch)
    if not report.valid:
        rules = ", ".join(f"{v.rule}@{v.layer}" for v in report.violated_rules)
        raise InvalidArchitecture(f"invalid architecture {arch}: {rules}")


@dataclass(frozen=True)
class Mapping:
    side_per_layer: tuple[Side, ...]
    implicit_return: bool

    def to_json(self) -> dict:
        return {"sides": [s.value for s in self.side_per_layer], "implicit_return": self.implicit_return}

    @classmethod
    def from_json(cls, d: dict) -> "Mapping":
        return cls(tuple(Side(s) for s in d["sides"]), bool(d["implicit_return"]))


def derive_mapping(arch: Architecture) -> Mapping:
    """Side per layer; a Communicate is attributed to the side it leaves from."""
    _require_valid(arch)
    side = Side.DEVICE
    sides = []
    last_compute = Side.DEVICE
    for layer in arch.layers:
        sides.append(side)
        if layer.op is OpKind.COMMUNICATE:
            side = side.other()
        else:
            last_compute = side
    return Mapping(tuple(sides), last_compute is Side.EDGE)


@dataclass(frozen=True)
class ShapeState:
    num_nodes: int
    feature_dim: int
    has_active_graph: bool
    active_k: int


@dataclass(frozen=True)
class TensorShapeTrace:
    """``inputs[i]``/``outputs[i]`` are the shapes entering/leaving layer ``i``."""

    inputs: tuple[ShapeState, ...]
    outputs: tuple[ShapeState, ...]
    skip_widths: tuple[int, ...] = field(default=())

    @property
    def final(self) -> ShapeState:
        return self.outputs[-1]

    def to_json(self) -> list:
        return [[s.num_nodes, s.feature_dim, s.has_active_graph, s.active_k] for s in self.outputs]


def trace_shapes(arch: Architecture) -> TensorShapeTrace:
    n, f = arch.input_shape
    graph, k = False, 0
    skip: int | None = None
    ins, outs, skips = [], [], []
    for i, layer in enumerate(arch.layers):
        state = ShapeState(n, f, graph, k)
        ins.append(state)
        skips.append(skip or 0)
        op = layer.op
        if op is OpKind.SAMPLE:
            graph, k = True, min(int(layer.k), max(n - 1, 1))
        elif op is OpKind.AGGREGATE:
            if not graph:
                raise InvalidArchitecture(f"aggregate at layer {i} without an active graph")
        elif op is OpKind.COMBINE:
            skip = f
            f = int(layer.out_dim)
        elif op is OpKind.CONNECT:
            if skip is None:
                raise InvalidArchitecture(f"connect at layer {i} has no skip source")
            f = f + skip
        elif op is OpKind.GLOBAL_POOLING:
            n, graph, k, skip = 1, False, 0, None
        elif op is OpKind.COMMUNICATE:
            pass
        outs.append(ShapeState(n, f, graph, k))
    return TensorShapeTrace(tuple(ins), tuple(outs), tuple(skips))


def forwards_graph(arch: Architecture, layer_idx: int) -> bool:
    """True iff an Aggregate follows ``layer_idx`` before the next Sample."""
    for layer in arch.layers[layer_idx + 1:]:
        if layer.op is OpKind.SAMPLE:
            return False
        if layer.op is OpKind.AGGREGATE:
            return True
    return False


def tensor_bytes(num_nodes: int, feature_dim: int, dtype_bytes: int = DTYPE_BYTES) -> int:
    return num_nodes * feature_dim * dtype_bytes


def graph_bytes(num_nodes: int, k: int) -> int:
    return num_nodes * k * INDEX_BYTES * 2


def comm_volume(arch: Architecture, layer_idx: int, trace: TensorShapeTrace | None = None) -> int:
    """Bytes on the wire for the Communicate at ``layer_idx`` (uncompressed)."""
    if not 0 <= layer_idx < len(arch) or arch.layers[layer_idx].op is not OpKind.COMMUNICATE:
        raise InvalidArchitecture(f"layer {layer_idx} is not a communicate")
    trace = trace or trace_shapes(arch)
    s = trace.inputs[layer_idx]
    volume = tensor_bytes(s.num_nodes, s.feature_dim, arch.dtype_bytes) + HEADER_BYTES
    if s.has_active_graph and forwards_graph(arch, layer_idx):
        volume += graph_bytes(s.num_nodes, s.active_k)
    return volume


def return_volume(arch: Architecture, trace: TensorShapeTrace | None = None) -> int:
    """Bytes of the implicit final-result transfer back to the device."""
    trace = trace or trace_shapes(arch)
    s = trace.final
    return tensor_bytes(s.num_nodes, s.feature_dim, arch.dtype_bytes) + HEADER_BYTES


def sample_valid(rng: np.random.Generator, space: SpaceConfig = DEFAULT_SPACE,
                 max_draws: int = 10_000) -> Architecture:
    """Rejection-sample until a valid architecture appears."""
    for _ in range(max_draws):
        kinds = _draw_kinds(rng, space)
        if kinds_valid(kinds):
            return _materialize(rng, space, kinds)
    raise ConfigError(f"no valid architecture in {max_draws} consecutive draws")


def communicate_positions(arch: Architecture | Sequence[Layer]) -> list[int]:
    layers = arch.layers if isinstance(arch, Architecture) else arch
    return [i for i, layer in enumerate(layers) if layer.op is OpKind.COMMUNICATE]
