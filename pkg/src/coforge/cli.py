"""coforge command line: profile -> gen-data -> train-pred -> search -> serve-edge / run-device -> report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cosim, predictor, report
from .archgraph import build_graph
from .design_space import DEFAULT_SPACE, Architecture, ConfigError, SpaceConfig, sample_valid, small_space
from .lut import ConfigBuckets, PerfLUT, analytic_lut, keys_of
from .manifest import Manifest, StaleArtifact
from .profiles import (DEFAULT_PACK, PROFILE_ENV, SystemConfig, load_pack, parse_bandwidth, parse_joules,
                       parse_seconds)
from .search import (ArchitectureZoo, PredictorEvaluator, SearchConfig, dispatch, search)

log = logging.getLogger("coforge")

EXIT_OK, EXIT_INFEASIBLE, EXIT_STALE, EXIT_PROTOCOL = 0, 2, 3, 4


def sub_seed(seed: int, label: str) -> int:
    """Independent, labeled seed derived from the single --seed flag."""
    return int(hashlib.sha256(f"{seed}:{label}".encode()).hexdigest()[:8], 16)


def _space(ref: str | None) -> SpaceConfig:
    if ref is None or ref == "default":
        return DEFAULT_SPACE
    if ref.startswith("small"):
        return small_space(int(ref[5:] or 4), min_layers=1)
    return SpaceConfig.from_json(json.loads(Path(ref).read_text()))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _load_system(ws: Manifest) -> SystemConfig:
    return SystemConfig.from_json(json.loads(ws.require("system").read_text()))


def _load_lut(ws: Manifest) -> PerfLUT:
    return PerfLUT.from_json(json.loads(ws.require("lut").read_text()))


def _override(sys_: SystemConfig, args) -> SystemConfig:
    if getattr(args, "bandwidth", None):
        sys_ = sys_.with_bandwidth(parse_bandwidth(args.bandwidth))
    c_lat = parse_seconds(args.c_lat) if getattr(args, "c_lat", None) else None
    c_e = parse_joules(args.c_e) if getattr(args, "c_e", None) else None
    lam = getattr(args, "lam", None)
    return sys_.with_constraints(c_lat, c_e, lam)


# --- commands -----------------------------------------------------------------------------

def cmd_profile(args, ws: Manifest) -> int:
    sys_ = _override(load_pack(args.pack), args)
    (ws.root / "system.json").write_text(_dump(sys_.to_json()))
    ws.record("system", "system.json")
    space = _space(args.space)
    if args.measure:
        from .runtime.profiler import profile_endpoint
        rng = np.random.default_rng(sub_seed(args.seed, "profile"))
        archs = [sample_valid(rng, space, 10**6) for _ in range(args.measure_archs)]
        res = profile_endpoint(ConfigBuckets.from_keys(keys_of(archs)), sys_, args.repetitions)
        lut, meta = res.lut, {"source": "measured", "machine": res.machine, "low_confidence": len(res.low_confidence)}
    else:
        lut, meta = analytic_lut(sys_, space), {"source": "analytic"}
    (ws.root / "lut.json").write_text(json.dumps(lut.to_json(), sort_keys=True) + "\n")
    ws.record("lut", "lut.json", ("system",), {**meta, "entries": len(lut), "space": space.to_json()})
    print(f"system {sys_.name} ({sys_.fingerprint()}), LUT with {len(lut)} entries ({meta['source']})")
    return EXIT_OK


def cmd_gen_data(args, ws: Manifest) -> int:
    sys_, lut = _load_system(ws), _load_lut(ws)
    space = _space(args.space)
    recs = cosim.generate_dataset(space, sys_, args.samples, sub_seed(args.seed, "dataset"), lut, args.train_frac)
    digest = cosim.write_dataset(ws.root / "dataset.jsonl", recs, sys_)
    tr, va = cosim.split(recs)
    meta = {"samples": len(recs), "train": len(tr), "val": len(va), "sha256": digest,
            "latency_median_s": float(np.median([r.latency_s for r in recs])),
            "energy_median_j": float(np.median([r.energy_j for r in recs])), "space": space.to_json()}
    ws.record("dataset", "dataset.jsonl", ("system", "lut"), meta)
    print(f"{len(recs)} records ({len(tr)} train / {len(va)} val) -> dataset.jsonl")
    return EXIT_OK


def cmd_train_pred(args, ws: Manifest) -> int:
    sys_, lut = _load_system(ws), _load_lut(ws)
    recs = cosim.read_dataset(ws.require("dataset"))
    hp = predictor.HyperParams(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, hidden=args.hidden,
                               schedule=args.schedule, warmup_epochs=args.warmup_epochs)
    (ws.root / "models").mkdir(exist_ok=True)
    (ws.root / "reports").mkdir(exist_ok=True)
    metrics = ("latency", "energy") if args.metric == "both" else (args.metric,)
    for metric in metrics:
        model, rep, _ = predictor.train(recs, metric, sys_, hp, sub_seed(args.seed, f"train-{metric}"), lut,
                                        enhanced=not args.one_hot)
        model.save(ws.root / "models" / f"{metric}.json")
        ws.record(f"model_{metric}", f"models/{metric}.json", ("dataset", "lut"))
        body = {"metric": metric, "features": "one-hot" if args.one_hot else "enhanced", "epochs": hp.epochs,
                **rep.to_json()}
        (ws.root / "reports" / f"train_{metric}.json").write_text(_dump(body))
        ws.record(f"train_report_{metric}", f"reports/train_{metric}.json", (f"model_{metric}",))
        print(f"{metric}: val MAPE {rep.val_mape:.4f}, within-10% {rep.within_10:.3f}, "
              f"within-20% {rep.within_20:.3f}, ranking {rep.ranking:.3f}")
    return EXIT_OK


def cmd_search(args, ws: Manifest) -> int:
    sys_ = _override(_load_system(ws), args)
    lut = _load_lut(ws)
    space = _space(args.space)
    cfg = SearchConfig(trials=args.trials, tune_trials=args.tune_trials, zoo_capacity=args.zoo_capacity,
                       seed=sub_seed(args.seed, "search"), evaluator=args.evaluator)
    evaluator = None
    inputs = ("system", "lut")
    if args.evaluator == "predictor":
        lat = predictor.PredictorModel.load(ws.require("model_latency"))
        en = predictor.PredictorModel.load(ws.require("model_energy"))
        evaluator = PredictorEvaluator(lat, en, sys_, lut)
        inputs += ("model_latency", "model_energy")
    result = search(space, sys_, cfg, evaluator, lut=lut)
    zoo_path = ws.root / "zoo.json"
    if ws.has("zoo"):
        ws.require("zoo")
    result.zoo.save(zoo_path)
    ws.record("zoo", "zoo.json", inputs)
    (ws.root / "trace.jsonl").write_text(result.trace_lines())
    ws.record("trace", "trace.jsonl", inputs)
    best = result.best
    summary = {"trials": cfg.trials, "tune_trials": cfg.tune_trials, "evaluator": args.evaluator,
               "fingerprint": result.fingerprint, "system": sys_.to_json(),
               "feasible_trials": sum(1 for r in result.trace if r.get("score", -1) != -1 and "draws" in r),
               "best": best.to_json() if best else None,
               "infeasible": result.infeasible.message() if result.infeasible else None}
    (ws.root / "search.json").write_text(_dump(summary))
    ws.record("search", "search.json", inputs + ("zoo",))
    if result.infeasible:
        print(result.infeasible.message(), file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"best score {best.score:.4f}: latency {best.latency_s * 1e3:.3f} ms, energy {best.energy_j:.4f} J, "
          f"arch {best.digest[:12]}")
    return EXIT_OK


def cmd_serve_edge(args, ws: Manifest | None) -> int:
    from .runtime.engine import EdgeConfig, serve_edge
    throttle = parse_bandwidth(args.throttle) if args.throttle else None
    serve_edge(args.bind, EdgeConfig(throttle_bps=throttle))
    return EXIT_OK


def _arch_from(path: Path, ws: Manifest, args) -> Architecture:
    d = json.loads(path.read_text())
    if "layers" in d:
        return Architecture.from_json(d)
    sys_ = _override(_load_system(ws), args)
    return dispatch(ArchitectureZoo.from_json(d), sys_, _load_lut(ws)).arch


def cmd_run_device(args, ws: Manifest) -> int:
    from .runtime.engine import RunConfig, run_device
    from .runtime.wire import ProtocolError
    src = Path(args.arch) if args.arch else ws.require("zoo")
    arch = _arch_from(src, ws, args)
    throttle = parse_bandwidth(args.throttle) if args.throttle else None
    cfg = RunConfig(pipeline_depth=args.pipeline_depth, throttle_bps=throttle, codec=args.codec,
                    seed=sub_seed(args.seed, "runtime"))
    try:
        rep = run_device(args.edge, arch, args.batches, cfg)
    except (ProtocolError, ConnectionError, OSError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    (ws.root / "runs").mkdir(exist_ok=True)
    n = sum(1 for k in ws.artifacts if k.startswith("run_"))
    name = f"run_{n:03d}"
    body = {"name": name, "arch_hash": arch.digest(), "pipeline_depth": args.pipeline_depth,
            "throttle_bps": throttle, **rep.to_json()}
    (ws.root / "runs" / f"{name}.json").write_text(_dump(body))
    ws.record(name, f"runs/{name}.json")
    print(f"{args.batches} batches: mean latency {rep.mean_latency_s * 1e3:.2f} ms, "
          f"throughput {rep.throughput_ips:.2f}/s, failed {len(rep.failed)}")
    return EXIT_PROTOCOL if rep.error else EXIT_OK


def cmd_report(args, ws: Manifest) -> int:
    data = report.collect(ws)
    text = report.render_summary(data)
    out = Path(args.out) if args.out else ws.root / "summary.md"
    out.write_text(text)
    trace = None
    if ws.has("trace"):
        trace = [json.loads(line) for line in ws.require("trace").read_text().splitlines() if line]
    report.write_csvs(data, ws.root / "csv", trace)
    if args.dump_graph:
        src = Path(args.dump_graph)
        d = json.loads(src.read_text())
        if "layers" in d:
            arch = Architecture.from_json(d)
        else:
            fp = data["search"]["fingerprint"] if data["search"] else None
            zoo = ArchitectureZoo.from_json(d)
            best = zoo.best(fp) if fp else None
            if best is None:
                raise ConfigError("zoo has no entry for the current search")
            arch = best.arch
        (ws.root / "arch.dot").write_text(build_graph(arch).to_dot())
    print(f"wrote {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coforge", description=__doc__)
    p.add_argument("--workspace", "-w", default="workspace", help="artifact directory (default ./workspace)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def constraints(sp):
        sp.add_argument("--bandwidth", help="e.g. 40mbps")
        sp.add_argument("--c-lat", help="latency constraint, e.g. 150ms")
        sp.add_argument("--c-e", help="device energy constraint, e.g. 0.8j")
        sp.add_argument("--lambda", dest="lam", type=float)

    sp = sub.add_parser("profile", help="load a profile pack and build the LUT")
    sp.add_argument("--pack", default=None, help=f"pack name or JSON path (default ${PROFILE_ENV} or {DEFAULT_PACK})")
    sp.add_argument("--space", default="default", help="default | smallN | path to a space JSON")
    sp.add_argument("--measure", action="store_true", help="time kernels on this machine instead of the cost model")
    sp.add_argument("--measure-archs", type=int, default=20)
    sp.add_argument("--repetitions", type=int, default=5)
    constraints(sp)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("gen-data", help="sample and label architectures with the simulator")
    sp.add_argument("--samples", type=int, default=9000)
    sp.add_argument("--train-frac", type=float, default=0.7)
    sp.add_argument("--space", default="default")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-pred", help="train latency / energy predictors")
    sp.add_argument("--metric", choices=("latency", "energy", "both"), default="both")
    sp.add_argument("--epochs", type=int, default=500)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--schedule", choices=("constant", "cosine"), default="constant")
    sp.add_argument("--warmup-epochs", type=int, default=5, help="leading epochs on the log-ratio loss")
    sp.add_argument("--one-hot", action="store_true", help="drop the LUT performance feature")
    sp.set_defaults(func=cmd_train_pred)

    sp = sub.add_parser("search", help="constraint-based random search")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--tune-trials", type=int, default=0)
    sp.add_argument("--zoo-capacity", type=int, default=10)
    sp.add_argument("--evaluator", choices=("simulator", "predictor"), default="simulator")
    sp.add_argument("--space", default="default")
    constraints(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("serve-edge", help="run the edge endpoint")
    sp.add_argument("--bind", default="0.0.0.0:7077")
    sp.add_argument("--throttle", help="sender rate limit, e.g. 10mbps")
    sp.set_defaults(func=cmd_serve_edge, no_workspace=True)

    sp = sub.add_parser("run-device", help="run batches against an edge endpoint")
    sp.add_argument("--edge", required=True, help="host:port")
    sp.add_argument("--arch", help="architecture or zoo JSON (default: workspace zoo)")
    sp.add_argument("--batches", type=int, default=64)
    sp.add_argument("--pipeline-depth", type=int, default=2)
    sp.add_argument("--throttle", help="sender rate limit, e.g. 10mbps")
    sp.add_argument("--codec", choices=("zlib", "identity"), default="zlib")
    constraints(sp)
    sp.set_defaults(func=cmd_run_device)

    sp = sub.add_parser("report", help="write Markdown and CSV summaries")
    sp.add_argument("--out")
    sp.add_argument("--dump-graph", metavar="ARCH_OR_ZOO_JSON")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = None if getattr(args, "no_workspace", False) else Manifest.open(args.workspace)
    try:
        return args.func(args, ws)
    except StaleArtifact as exc:
        print(f"stale input: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (ConfigError, predictor.ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
