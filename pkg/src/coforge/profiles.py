"""Endpoint, network and system configuration with the analytic cost/power models.

Operation time on an endpoint (N nodes, F input width):

    sample          c_sample    * N^2 * F       / throughput
    aggregate       c_aggregate * N * k * F     / throughput
    combine         c_combine   * N * F * F_out / throughput
    global_pooling  c_pool      * N * F         / throughput
    connect         c_connect   * N * (F + S)   / throughput

Run power of an op is linear in F between two calibration points and
clamped outside them.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .design_space import ConfigError, OpKind

COMPUTE_OPS: tuple[OpKind, ...] = (
    OpKind.SAMPLE, OpKind.AGGREGATE, OpKind.COMBINE, OpKind.GLOBAL_POOLING, OpKind.CONNECT,
)
PACK_NAMES = ("tx2-gpu", "tx2-cpu", "pi-gpu", "pi-cpu")
DEFAULT_PACK = "tx2-gpu"
PROFILE_ENV = "COFORGE_PROFILE"


def op_work(op: OpKind, n: int, f: int, p: int) -> float:
    """Abstract work units of one op; ``p`` is k, F_out or the skip width."""
    if op is OpKind.SAMPLE:
        return float(n) * n * f
    if op is OpKind.AGGREGATE:
        return float(n) * p * f
    if op is OpKind.COMBINE:
        return float(n) * f * p
    if op is OpKind.GLOBAL_POOLING:
        return float(n) * f
    if op is OpKind.CONNECT:
        return float(n) * (f + p)
    raise ConfigError(f"{op.value} has no compute cost")


@dataclass(frozen=True)
class EndpointProfile:
    name: str
    throughput: float
    coeffs: dict
    run_power: dict
    idle_power: float
    comm_power: float

    def __post_init__(self):
        if self.throughput <= 0:
            raise ConfigError(f"{self.name}: throughput must be positive")
        if self.idle_power <= 0 or self.comm_power <= 0:
            raise ConfigError(f"{self.name}: powers must be positive")
        if self.comm_power < self.idle_power:
            raise ConfigError(f"{self.name}: comm power below idle power")
        for op in COMPUTE_OPS:
            if op.value not in self.coeffs or self.coeffs[op.value] < 0:
                raise ConfigError(f"{self.name}: missing/negative cost coefficient for {op.value}")
            pts = self.run_power.get(op.value)
            if not pts or len(pts) != 2:
                raise ConfigError(f"{self.name}: run power for {op.value} needs two calibration points")
            for _, p in pts:
                if p <= 0 or p < self.idle_power:
                    raise ConfigError(f"{self.name}: run power of {op.value} below idle power")

    def op_time(self, op: OpKind, n: int, f: int, p: int) -> float:
        return self.coeffs[op.value] * op_work(op, n, f, p) / self.throughput

    def power(self, op: OpKind, f: int) -> float:
        (f0, p0), (f1, p1) = self.run_power[op.value]
        if f1 == f0:
            return float(p0)
        w = min(max((f - f0) / (f1 - f0), 0.0), 1.0)
        return float(p0 + w * (p1 - p0))

    def to_json(self) -> dict:
        return {"name": self.name, "throughput": self.throughput, "coeffs": dict(self.coeffs),
                "run_power": {k: [list(x) for x in v] for k, v in self.run_power.items()},
                "idle_power": self.idle_power, "comm_power": self.comm_power}

    @classmethod
    def from_json(cls, d: dict) -> "EndpointProfile":
        return cls(d["name"], float(d["throughput"]), {k: float(v) for k, v in d["coeffs"].items()},
                   {k: tuple(tuple(float(y) for y in x) for x in v) for k, v in d["run_power"].items()},
                   float(d["idle_power"]), float(d["comm_power"]))


@dataclass(frozen=True)
class NetworkModel:
    bandwidth_bps: float = 40e6
    per_message_overhead_s: float = 0.002
    compression_ratio_estimate: float = 1.0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ConfigError("bandwidth must be positive")
        if self.per_message_overhead_s < 0:
            raise ConfigError("per-message overhead must be >= 0")
        if not 0 < self.compression_ratio_estimate <= 1:
            raise ConfigError("compression ratio estimate must lie in (0, 1]")

    def raw_time(self, nbytes: float) -> float:
        return nbytes * 8.0 / self.bandwidth_bps

    def wire_time(self, nbytes: float) -> float:
        """Transfer time of one message as the simulator charges it."""
        return nbytes * self.compression_ratio_estimate * 8.0 / self.bandwidth_bps + self.per_message_overhead_s

    def to_json(self) -> dict:
        return {"bandwidth_bps": self.bandwidth_bps, "per_message_overhead_s": self.per_message_overhead_s,
                "compression_ratio_estimate": self.compression_ratio_estimate}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkModel":
        return cls(float(d["bandwidth_bps"]), float(d.get("per_message_overhead_s", 0.0)),
                   float(d.get("compression_ratio_estimate", 1.0)))


@dataclass(frozen=True)
class SystemConfig:
    device: EndpointProfile
    edge: EndpointProfile
    net: NetworkModel = field(default_factory=NetworkModel)
    c_lat: float = 0.2
    c_e: float = 1.0
    lam: float = 0.5
    w_l: float = 1.0
    w_e: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if not self.c_lat > 0 or not self.c_e > 0:
            raise ConfigError("constraints must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")

    def endpoint(self, side) -> EndpointProfile:
        value = getattr(side, "value", side)
        if value == "device":
            return self.device
        if value == "edge":
            return self.edge
        raise ConfigError(f"unknown endpoint {side!r}")

    def with_bandwidth(self, bps: float) -> "SystemConfig":
        return replace(self, net=replace(self.net, bandwidth_bps=float(bps)))

    def with_constraints(self, c_lat: float | None = None, c_e: float | None = None,
                         lam: float | None = None) -> "SystemConfig":
        return replace(self, c_lat=self.c_lat if c_lat is None else float(c_lat),
                       c_e=self.c_e if c_e is None else float(c_e),
                       lam=self.lam if lam is None else float(lam))

    def profiles_json(self) -> dict:
        return {"device": self.device.to_json(), "edge": self.edge.to_json()}

    def to_json(self) -> dict:
        return {"name": self.name, **self.profiles_json(), "network": self.net.to_json(),
                "constraints": {"c_lat_s": self.c_lat, "c_e_j": self.c_e},
                "lambda": self.lam, "weights": [self.w_l, self.w_e]}

    @classmethod
    def from_json(cls, d: dict) -> "SystemConfig":
        c = d.get("constraints", {})
        w = d.get("weights", [1.0, 1.0])
        return cls(EndpointProfile.from_json(d["device"]), EndpointProfile.from_json(d["edge"]),
                   NetworkModel.from_json(d.get("network", {"bandwidth_bps": 40e6})),
                   float(c.get("c_lat_s", 0.2)), float(c.get("c_e_j", 1.0)),
                   float(d.get("lambda", 0.5)), float(w[0]), float(w[1]), d.get("name", "custom"))

    def fingerprint(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def profile_fingerprint(self) -> str:
        text = json.dumps(self.profiles_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_bandwidth(text: str | float) -> float:
    """'40mbps' -> 4e7 bits/s."""
    if isinstance(text, (int, float)):
        return float(text)
    t = text.strip().lower()
    for suffix, mult in (("gbps", 1e9), ("mbps", 1e6), ("kbps", 1e3), ("bps", 1.0)):
        if t.endswith(suffix):
            return float(t[: -len(suffix)]) * mult
    return float(t)


def parse_quantity(text: str | float, units: dict[str, float]) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    t = text.strip().lower()
    for suffix in sorted(units, key=len, reverse=True):
        if t.endswith(suffix):
            return float(t[: -len(suffix)]) * units[suffix]
    return float(t)


def parse_seconds(text: str | float) -> float:
    return parse_quantity(text, {"ms": 1e-3, "us": 1e-6, "s": 1.0})


def parse_joules(text: str | float) -> float:
    return parse_quantity(text, {"mj": 1e-3, "j": 1.0})


def load_pack(ref: str | os.PathLike | None = None) -> SystemConfig:
    """Load a profile pack by builtin name or JSON path; falls back to $COFORGE_PROFILE."""
    if ref is None:
        ref = os.environ.get(PROFILE_ENV, DEFAULT_PACK)
    ref = str(ref)
    if ref in PACK_NAMES:
        text = resources.files("coforge.packs").joinpath(f"{ref}.json").read_text()
    else:
        path = Path(ref)
        if not path.exists():
            raise ConfigError(f"profile pack not found: {ref}")
        text = path.read_text()
    return SystemConfig.from_json(json.loads(text))


def pack_text(ref: str) -> str:
    if ref in PACK_NAMES:
        return resources.files("coforge.packs").joinpath(f"{ref}.json").read_text()
    return Path(ref).read_text()


def all_packs() -> list[SystemConfig]:
    return [load_pack(n) for n in PACK_NAMES]


def fixed_power(profile: EndpointProfile) -> float:
    """Constant run power used by the fixed-power energy estimate: the mean over
    ops of each op's two calibration points."""
    vals = [p for op in COMPUTE_OPS for _, p in profile.run_power[op.value]]
    return sum(vals) / len(vals)

