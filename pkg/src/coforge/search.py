"""Constraint-based two-stage random search, the evolutionary baseline,
the architecture zoo and the runtime dispatcher."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .cosim import RejectionError, simulate
from .design_space import (Architecture, ConfigError, Mapping, OpKind, SpaceConfig,
                           _draw_kinds, _materialize, derive_mapping, enumerate_space, is_valid,
                           kinds_valid)
from .lut import PerfLUT, analytic_lut
from .profiles import SystemConfig

log = logging.getLogger(__name__)

INVALID_SCORE = -1.0
OBJECTIVES = ("min_latency", "min_energy", "max_score")


# --- accuracy oracles --------------------------------------------------------------

def _motif_stats(arch: Architecture) -> tuple[int, int, int, bool]:
    """(complete sample->aggregate->combine motifs, aggregates, total combine width,
    pooled classifier head). Communicate layers are transparent."""
    ops = [layer for layer in arch.layers if layer.op is not OpKind.COMMUNICATE]
    motifs = 0
    for i in range(len(ops) - 2):
        if (ops[i].op is OpKind.SAMPLE and ops[i + 1].op is OpKind.AGGREGATE
                and ops[i + 2].op is OpKind.COMBINE):
            motifs += 1
    aggregates = sum(1 for layer in ops if layer.op is OpKind.AGGREGATE)
    width = sum(layer.out_dim for layer in ops if layer.op is OpKind.COMBINE)
    pooled = False
    seen_pool = False
    for layer in ops:
        if layer.op is OpKind.GLOBAL_POOLING:
            seen_pool = True
        elif seen_pool and layer.op is OpKind.COMBINE:
            pooled = True
    return motifs, aggregates, width, pooled


class SyntheticAccuracy:
    """Deterministic stand-in for one-shot supernet accuracy.

    raw = 0.6*motifs + 0.3*aggregates + 0.15*log2(1 + width/64) + 0.2*[pooled head]
    acc = 0.35 + 0.6*(1 - exp(-raw/2))

    Every term is non-decreasing in model capacity, so adding a
    (Sample, Aggregate) pair or widening a Combine never lowers accuracy.
    """

    def __call__(self, arch: Architecture) -> float:
        motifs, aggregates, width, pooled = _motif_stats(arch)
        raw = 0.6 * motifs + 0.3 * aggregates + 0.15 * math.log2(1.0 + width / 64.0) + 0.2 * pooled
        return 0.35 + 0.6 * (1.0 - math.exp(-raw / 2.0))


class TableAccuracy:
    """Accuracy looked up by architecture digest."""

    def __init__(self, table: dict[str, float]):
        self.table = {k: float(v) for k, v in table.items()}

    @classmethod
    def load(cls, path: str | Path) -> "TableAccuracy":
        return cls(json.loads(Path(path).read_text()))

    def __call__(self, arch: Architecture) -> float:
        key = arch.digest()
        if key not in self.table:
            raise KeyError(f"no accuracy recorded for architecture {key[:12]}")
        return self.table[key]


AccuracyOracle = Callable[[Architecture], float]


# --- scoring ---------------------------------------------------------------------

def system_penalty(latency: float, energy: float, sys: SystemConfig) -> float:
    return sys.w_l * latency / sys.c_lat + sys.w_e * energy / sys.c_e


def feasible(latency: float, energy: float, sys: SystemConfig) -> bool:
    return latency < sys.c_lat and energy < sys.c_e


def score(acc: float, latency: float, energy: float, sys: SystemConfig) -> float:
    if not feasible(latency, energy, sys):
        return INVALID_SCORE
    return acc - sys.lam * system_penalty(latency, energy, sys)


class Evaluator(Protocol):
    kind: str

    def __call__(self, arch: Architecture) -> tuple[float, float]: ...


class SimulatorEvaluator:
    kind = "simulator"

    def __init__(self, sys: SystemConfig, lut: PerfLUT | None = None):
        self.sys = sys
        self.lut = lut or analytic_lut(sys)

    def __call__(self, arch: Architecture) -> tuple[float, float]:
        est = simulate(arch, self.sys, self.lut)
        return est.latency_s, est.device_energy_j


class PredictorEvaluator:
    """Latency from the LUT-corrected latency model, energy from the energy model."""

    kind = "predictor"

    def __init__(self, latency_model, energy_model, sys: SystemConfig, lut: PerfLUT | None = None):
        from . import predictor
        if latency_model.metric != "latency" or energy_model.metric != "energy":
            raise ConfigError("predictor evaluator needs a latency model and an energy model")
        self._p = predictor
        self.lat_model, self.en_model = latency_model, energy_model
        self.sys = sys
        self.lut = lut or analytic_lut(sys)

    def __call__(self, arch: Architecture) -> tuple[float, float]:
        lat = self._p.predict_corrected(self.lat_model, arch, self.sys, self.lut)
        en = float(self._p.predict(self.en_model, [arch], self.sys, self.lut)[0])
        return lat, en


# --- zoo -------------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredCandidate:
    arch: Architecture
    mapping: Mapping
    acc: float
    latency_s: float
    energy_j: float
    score: float
    source: str = "simulator"

    @property
    def digest(self) -> str:
        return self.arch.digest()

    def to_json(self) -> dict:
        return {"arch": self.arch.to_json(), "hash": self.digest, "mapping": self.mapping.to_json(),
                "acc": self.acc, "latency_s": self.latency_s, "energy_j": self.energy_j,
                "score": self.score, "source": self.source}

    @classmethod
    def from_json(cls, d: dict) -> "ScoredCandidate":
        return cls(Architecture.from_json(d["arch"]), Mapping.from_json(d["mapping"]), float(d["acc"]),
                   float(d["latency_s"]), float(d["energy_j"]), float(d["score"]), d.get("source", "simulator"))


def _sort_key(objective: str):
    if objective == "min_latency":
        return lambda c: (c.latency_s, c.digest)
    if objective == "min_energy":
        return lambda c: (c.energy_j, c.digest)
    if objective == "max_score":
        return lambda c: (-c.score, c.digest)
    raise ValueError(f"unknown objective {objective!r}")


class ArchitectureZoo:
    """Top-k constraint-satisfying candidates per objective, keyed by system fingerprint."""

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ConfigError("zoo capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict[str, dict[str, list[ScoredCandidate]]] = {}
        self.systems: dict[str, dict] = {}

    def __len__(self) -> int:
        return len({c.digest for lists in self.entries.values() for lst in lists.values() for c in lst})

    def fingerprints(self) -> list[str]:
        return sorted(self.entries)

    def register(self, sys: SystemConfig) -> str:
        fp = sys.fingerprint()
        self.systems.setdefault(fp, sys.to_json())
        self.entries.setdefault(fp, {o: [] for o in OBJECTIVES})
        return fp

    def add(self, fp: str, cand: ScoredCandidate) -> bool:
        """Insert into every objective list it qualifies for; infeasible candidates are refused."""
        if cand.score == INVALID_SCORE:
            return False
        lists = self.entries.setdefault(fp, {o: [] for o in OBJECTIVES})
        changed = False
        for obj in OBJECTIVES:
            lst = lists[obj]
            if any(c.digest == cand.digest for c in lst):
                continue
            key = _sort_key(obj)
            if len(lst) >= self.capacity and key(cand) >= key(lst[-1]):
                continue
            lst.append(cand)
            lst.sort(key=key)
            del lst[self.capacity:]
            changed = True
        return changed

    def remove(self, fp: str, digest: str) -> None:
        for lst in self.entries.get(fp, {}).values():
            lst[:] = [c for c in lst if c.digest != digest]

    def top(self, fp: str, objective: str = "max_score") -> list[ScoredCandidate]:
        return list(self.entries.get(fp, {}).get(objective, []))

    def best(self, fp: str) -> ScoredCandidate | None:
        lst = self.top(fp, "max_score")
        return lst[0] if lst else None

    def candidates(self, fp: str | None = None) -> list[ScoredCandidate]:
        """Distinct entries (across objectives) in digest order."""
        fps = [fp] if fp is not None else self.fingerprints()
        seen: dict[str, ScoredCandidate] = {}
        for f in fps:
            for lst in self.entries.get(f, {}).values():
                for c in lst:
                    seen.setdefault(c.digest, c)
        return [seen[k] for k in sorted(seen)]

    def to_json(self) -> dict:
        return {"capacity": self.capacity, "systems": self.systems,
                "entries": {fp: {o: [c.to_json() for c in lists[o]] for o in OBJECTIVES}
                            for fp, lists in sorted(self.entries.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureZoo":
        zoo = cls(int(d.get("capacity", 10)))
        zoo.systems = dict(d.get("systems", {}))
        for fp, lists in d.get("entries", {}).items():
            zoo.entries[fp] = {o: [ScoredCandidate.from_json(c) for c in lists.get(o, [])] for o in OBJECTIVES}
        return zoo

    def merge(self, other: "ArchitectureZoo") -> None:
        for fp, sysd in other.systems.items():
            self.systems.setdefault(fp, sysd)
        for fp, lists in other.entries.items():
            self.entries.setdefault(fp, {o: [] for o in OBJECTIVES})
            for lst in lists.values():
                for c in lst:
                    self.add(fp, c)

    def save(self, path: str | Path) -> None:
        """Merge into whatever is already stored at ``path``; other fingerprints are never dropped."""
        path = Path(path)
        merged = ArchitectureZoo(self.capacity)
        if path.exists():
            merged = ArchitectureZoo.from_json(json.loads(path.read_text()))
            merged.capacity = max(merged.capacity, self.capacity)
        merged.merge(self)
        path.write_text(json.dumps(merged.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ArchitectureZoo":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- search ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    trials: int = 1000
    tune_trials: int = 0
    zoo_capacity: int = 10
    seed: int = 0
    evaluator: str = "simulator"
    top_candidates: int = 10
    acc_budget: float = 0.005
    max_consecutive_rejects: int = 10_000
    min_out_dim: int = 8
    min_k: int = 2

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.tune_trials < 0:
            raise ConfigError("tune_trials must be >= 0")
        if self.evaluator not in ("simulator", "predictor"):
            raise ConfigError(f"unknown evaluator {self.evaluator!r}")


@dataclass(frozen=True)
class Infeasibility:
    """Why the search found nothing: the best latency and energy it ever saw."""

    trials: int
    c_lat: float
    c_e: float
    min_latency_s: float
    min_energy_j: float

    def message(self) -> str:
        return (f"no architecture met the constraints in {self.trials} trials: "
                f"fastest {self.min_latency_s * 1e3:.3f} ms vs C_lat {self.c_lat * 1e3:.3f} ms, "
                f"lowest energy {self.min_energy_j:.4g} J vs C_e {self.c_e:.4g} J")

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SearchResult:
    zoo: ArchitectureZoo
    fingerprint: str
    trace: list[dict] = field(default_factory=list)
    infeasible: Infeasibility | None = None

    @property
    def best(self) -> ScoredCandidate | None:
        return self.zoo.best(self.fingerprint)

    @property
    def best_score(self) -> float:
        b = self.best
        return b.score if b is not None else INVALID_SCORE

    def trace_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def _draw_valid(rng: np.random.Generator, space: SpaceConfig, limit: int) -> tuple[Architecture, int]:
    draws = 0
    while True:
        kinds = _draw_kinds(rng, space)
        draws += 1
        if kinds_valid(kinds):
            return _materialize(rng, space, kinds), draws
        if draws >= limit:
            raise RejectionError(f"no valid architecture in {limit} consecutive draws")


def _candidate(arch, acc, lat, en, sys, source) -> ScoredCandidate:
    return ScoredCandidate(arch, derive_mapping(arch), acc, lat, en, score(acc, lat, en, sys), source)


def stage1(space: SpaceConfig, sys: SystemConfig, cfg: SearchConfig = SearchConfig(),
           evaluator: Evaluator | None = None, accuracy: AccuracyOracle | None = None,
           lut: PerfLUT | None = None) -> SearchResult:
    """Uniform rejection sampling over valid architectures for ``cfg.trials`` iterations."""
    accuracy = accuracy or SyntheticAccuracy()
    if evaluator is None:
        if cfg.evaluator != "simulator":
            raise ConfigError("predictor evaluation needs an explicit PredictorEvaluator")
        evaluator = SimulatorEvaluator(sys, lut)
    rng = np.random.default_rng([cfg.seed, 41])
    zoo = ArchitectureZoo(cfg.zoo_capacity)
    fp = zoo.register(sys)
    trace: list[dict] = []
    best = INVALID_SCORE
    min_lat = min_en = math.inf
    pending: dict[str, ScoredCandidate] = {}
    via_predictor = evaluator.kind == "predictor"
    for it in range(cfg.trials):
        arch, draws = _draw_valid(rng, space, cfg.max_consecutive_rejects)
        lat, en = evaluator(arch)
        min_lat, min_en = min(min_lat, lat), min(min_en, en)
        cand = _candidate(arch, accuracy(arch), lat, en, sys, evaluator.kind)
        if cand.score != INVALID_SCORE:
            if via_predictor:
                pending.setdefault(cand.digest, cand)
            else:
                zoo.add(fp, cand)
            best = max(best, cand.score)
        trace.append({"iter": it, "hash": cand.digest[:16], "draws": draws, "acc": cand.acc,
                      "latency_s": lat, "energy_j": en, "score": cand.score, "best_score": best,
                      "evaluator": evaluator.kind})
    if via_predictor:
        _admit_resimulated(zoo, fp, pending.values(), sys, cfg, lut)
    infeasible = None
    if zoo.best(fp) is None:
        infeasible = Infeasibility(cfg.trials, sys.c_lat, sys.c_e, min_lat, min_en)
        log.warning(infeasible.message())
    return SearchResult(zoo, fp, trace, infeasible)


def _admit_resimulated(zoo: ArchitectureZoo, fp: str, pending: Iterable[ScoredCandidate],
                       sys: SystemConfig, cfg: SearchConfig, lut: PerfLUT | None) -> None:
    """Re-score the predictor's top candidates with the simulator before admission."""
    pending = list(pending)
    chosen: dict[str, ScoredCandidate] = {}
    for obj in OBJECTIVES:
        n = cfg.top_candidates if obj == "max_score" else cfg.zoo_capacity
        for c in sorted(pending, key=_sort_key(obj))[:n]:
            chosen.setdefault(c.digest, c)
    sim = SimulatorEvaluator(sys, lut)
    for digest in sorted(chosen):
        c = chosen[digest]
        lat, en = sim(c.arch)
        zoo.add(fp, _candidate(c.arch, c.acc, lat, en, sys, "simulator"))


def _scale_down(arch: Architecture, rng: np.random.Generator, cfg: SearchConfig) -> Architecture | None:
    """Halve one Combine width or decrement one Sample k; None when nothing can shrink."""
    options = []
    for i, layer in enumerate(arch.layers):
        if layer.op is OpKind.COMBINE and layer.out_dim // 2 >= cfg.min_out_dim:
            options.append(i)
        elif layer.op is OpKind.SAMPLE and layer.k - 1 >= cfg.min_k:
            options.append(i)
    if not options:
        return None
    i = options[int(rng.integers(len(options)))]
    layer = arch.layers[i]
    if layer.op is OpKind.COMBINE:
        new = replace(layer, out_dim=layer.out_dim // 2)
    else:
        new = replace(layer, k=layer.k - 1)
    layers = list(arch.layers)
    layers[i] = new
    return Architecture(tuple(layers), arch.input_shape, arch.dtype_bytes)


def stage2(result: SearchResult, sys: SystemConfig, cfg: SearchConfig,
           accuracy: AccuracyOracle | None = None, lut: PerfLUT | None = None) -> SearchResult:
    """Function scale-down tuning of the top zoo members.

    Acceptance looks only at the accuracy drop; accepted variants are
    re-simulated so that zoo entries keep their constraint guarantee.
    """
    if cfg.tune_trials == 0:
        return result
    accuracy = accuracy or SyntheticAccuracy()
    zoo, fp = result.zoo, result.fingerprint
    pool = zoo.top(fp, "max_score")[:cfg.top_candidates]
    if not pool:
        raise ConfigError("function tuning needs a nonempty zoo")
    rng = np.random.default_rng([cfg.seed, 42])
    sim = SimulatorEvaluator(sys, lut)
    for it in range(cfg.tune_trials):
        j = int(rng.integers(len(pool)))
        base = pool[j]
        variant = _scale_down(base.arch, rng, cfg)
        rec = {"iter": it, "stage": 2, "base": base.digest[:16], "accepted": False}
        if variant is not None:
            acc = accuracy(variant)
            rec["acc_drop"] = base.acc - acc
            if base.acc - acc <= cfg.acc_budget:
                lat, en = sim(variant)
                cand = _candidate(variant, acc, lat, en, sys, "simulator")
                if cand.score != INVALID_SCORE:
                    zoo.remove(fp, base.digest)
                    zoo.add(fp, cand)
                    pool[j] = cand
                    rec.update(accepted=True, hash=cand.digest[:16], latency_s=lat, energy_j=en,
                               score=cand.score)
        result.trace.append(rec)
    if zoo.best(fp) is not None:
        result.infeasible = None
    return result


def search(space: SpaceConfig, sys: SystemConfig, cfg: SearchConfig = SearchConfig(),
           evaluator: Evaluator | None = None, accuracy: AccuracyOracle | None = None,
           lut: PerfLUT | None = None) -> SearchResult:
    result = stage1(space, sys, cfg, evaluator, accuracy, lut)
    if cfg.tune_trials and result.zoo.best(result.fingerprint) is not None:
        stage2(result, sys, cfg, accuracy, lut)
    return result


# --- evolutionary baseline ---------------------------------------------------------------

@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 20
    offspring: int = 20
    mutation_rate: float = 0.15
    trials: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.population < 1 or self.offspring < 1:
            raise ConfigError("population and offspring must be >= 1")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must lie in [0, 1]")


@dataclass
class EvolutionResult:
    best_score: float
    best: ScoredCandidate | None
    trace: list[dict]
    offspring_total: int
    offspring_invalid: int
    population: list[tuple[float, Architecture]]

    @property
    def invalid_rate(self) -> float:
        return self.offspring_invalid / self.offspring_total if self.offspring_total else 0.0


def _mutate(arch: Architecture, space: SpaceConfig, rate: float, rng: np.random.Generator) -> Architecture:
    layers = list(arch.layers)
    for i in range(len(layers)):
        if rng.random() < rate:
            choices = [layer for kind in space.slot_kinds(i) for layer in space.slot_layers(i, kind)]
            layers[i] = choices[int(rng.integers(len(choices)))]
    return Architecture(tuple(layers), arch.input_shape, arch.dtype_bytes)


def evolutionary_baseline(space: SpaceConfig, sys: SystemConfig, cfg: EvolutionConfig = EvolutionConfig(),
                          evaluator: Evaluator | None = None, accuracy: AccuracyOracle | None = None,
                          lut: PerfLUT | None = None, initial: list[Architecture] | None = None) -> EvolutionResult:
    """(mu + lambda) search with per-layer mutation; duplicate genomes survive once.

    The seed population is rejection-sampled (each draw that yields a valid
    member counts as one trial); offspring are not repaired, and an invalid
    child scores -1 and still costs a trial.
    """
    accuracy = accuracy or SyntheticAccuracy()
    evaluator = evaluator or SimulatorEvaluator(sys, lut)
    rng = np.random.default_rng([cfg.seed, 43])
    trials = 0
    best: ScoredCandidate | None = None
    trace: list[dict] = []

    def evaluate(arch: Architecture) -> float:
        nonlocal trials, best
        trials += 1
        if not is_valid(arch):
            s = INVALID_SCORE
        else:
            lat, en = evaluator(arch)
            cand = _candidate(arch, accuracy(arch), lat, en, sys, evaluator.kind)
            s = cand.score
            if s != INVALID_SCORE and (best is None or s > best.score):
                best = cand
        trace.append({"trial": trials, "score": s, "best_score": best.score if best else INVALID_SCORE})
        return s

    pop: list[tuple[float, Architecture]] = []
    if initial is not None:
        pop = [(evaluate(a), a) for a in initial]
    else:
        while len(pop) < cfg.population and trials < cfg.trials:
            arch, _ = _draw_valid(rng, space, 10_000)
            pop.append((evaluate(arch), arch))
    total = invalid = 0
    while trials < cfg.trials:
        children = []
        for _ in range(cfg.offspring):
            if trials >= cfg.trials:
                break
            parent = pop[int(rng.integers(len(pop)))][1]
            child = _mutate(parent, space, cfg.mutation_rate, rng)
            s = evaluate(child)
            total += 1
            invalid += s == INVALID_SCORE and not is_valid(child)
            children.append((s, child))
        merged = []
        seen = set()
        for s, a in pop + children:
            key = a.dumps()
            if key not in seen:
                seen.add(key)
                merged.append((s, a))
        # stable: survivors ordered by score, ties keep the older individual first
        order = sorted(range(len(merged)), key=lambda i: -merged[i][0])
        pop = [merged[i] for i in order[:cfg.population]]
    return EvolutionResult(best.score if best else INVALID_SCORE, best, trace, total, invalid, pop)


# --- dispatch -------------------------------------------------------------------------------

def dispatch(zoo: ArchitectureZoo, sys: SystemConfig, lut: PerfLUT | None = None,
             accuracy: AccuracyOracle | None = None) -> ScoredCandidate:
    """Pick a deployment for the current system conditions.

    Every zoo entry is re-simulated under ``sys``; the highest-scoring
    feasible one wins, ties broken by architecture hash. With no feasible
    entry the fastest one is returned.
    """
    cands = zoo.candidates()
    if not cands:
        raise ConfigError("empty architecture zoo")
    sim = SimulatorEvaluator(sys, lut)
    rescored = []
    for c in cands:
        lat, en = sim(c.arch)
        acc = accuracy(c.arch) if accuracy is not None else c.acc
        rescored.append(_candidate(c.arch, acc, lat, en, sys, "simulator"))
    ok = [c for c in rescored if c.score != INVALID_SCORE]
    if ok:
        return min(ok, key=lambda c: (-c.score, c.digest))
    return min(rescored, key=lambda c: (c.latency_s, c.digest))


# --- exhaustive reference ---------------------------------------------------------------------

def exhaustive_optimum(space: SpaceConfig, sys: SystemConfig, accuracy: AccuracyOracle | None = None,
                       lut: PerfLUT | None = None) -> tuple[float, list[ScoredCandidate]]:
    """Best score over every valid architecture of an enumerable space, and all scored candidates."""
    accuracy = accuracy or SyntheticAccuracy()
    sim = SimulatorEvaluator(sys, lut)
    scored = []
    for arch in enumerate_space(space):
        if not is_valid(arch):
            continue
        lat, en = sim(arch)
        scored.append(_candidate(arch, accuracy(arch), lat, en, sys, "simulator"))
    best = max((c.score for c in scored), default=INVALID_SCORE)
    return best, scored
