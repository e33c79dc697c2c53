"""Markdown and CSV summaries of a workspace."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .manifest import Manifest

RUN_COLUMNS = ("run", "arch", "batches", "depth", "throttle_mbps", "mean_latency_ms", "throughput_ips",
               "bytes_sent", "failed")
PRED_COLUMNS = ("metric", "features", "epochs", "train_mape", "val_mape", "within_10", "within_20", "ranking")
TRACE_COLUMNS = ("iter", "score", "best_score", "latency_s", "energy_j")


def _table(headers, rows) -> str:
    out = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(out)


def _f(x, nd=4) -> str:
    return "n/a" if x is None or x != x else f"{x:.{nd}f}"


def collect(ws: Manifest) -> dict:
    """Everything the report needs, read from fresh artifacts only."""
    data: dict = {"system": None, "dataset": None, "predictors": [], "search": None, "zoo": [], "runs": []}
    if ws.has("system"):
        data["system"] = json.loads(ws.require("system").read_text())
    if ws.has("dataset"):
        ws.require("dataset")
        data["dataset"] = ws.meta("dataset")
    for metric in ("latency", "energy"):
        name = f"train_report_{metric}"
        if ws.has(name):
            data["predictors"].append(json.loads(ws.require(name).read_text()))
    if ws.has("search"):
        data["search"] = json.loads(ws.require("search").read_text())
    if ws.has("zoo"):
        zoo = json.loads(ws.require("zoo").read_text())
        fp = data["search"]["fingerprint"] if data["search"] else None
        lists = zoo["entries"].get(fp, {}) if fp else {}
        data["zoo"] = lists.get("max_score", [])
    for name in sorted(n for n in ws.artifacts if n.startswith("run_")):
        data["runs"].append(json.loads(ws.require(name).read_text()))
    return data


def render_summary(data: dict) -> str:
    lines = ["# Co-inference search summary", ""]
    lines += ["## System", ""]
    sysd = data.get("system")
    rows = []
    if sysd:
        net = sysd["network"]
        rows.append((sysd["name"], _f(net["bandwidth_bps"] / 1e6, 1), _f(sysd["constraints"]["c_lat_s"] * 1e3, 1),
                     _f(sysd["constraints"]["c_e_j"], 3), _f(sysd["lambda"], 2)))
    lines += [_table(("pack", "bandwidth_mbps", "c_lat_ms", "c_e_j", "lambda"), rows), ""]

    lines += ["## Dataset", ""]
    ds = data.get("dataset")
    rows = []
    if ds:
        rows.append((ds["samples"], ds["train"], ds["val"], _f(ds["latency_median_s"] * 1e3, 3),
                     _f(ds["energy_median_j"], 4), ds["sha256"][:12]))
    lines += [_table(("samples", "train", "val", "latency_median_ms", "energy_median_j", "sha256"), rows), ""]

    lines += ["## Predictors", ""]
    rows = [(p["metric"], p["features"], p["epochs"], _f(p["train_mape"]), _f(p["val_mape"]),
             _f(p["within_10"]), _f(p["within_20"]), _f(p["ranking"])) for p in data.get("predictors", [])]
    lines += [_table(PRED_COLUMNS, rows), ""]

    lines += ["## Search", ""]
    s = data.get("search")
    rows = []
    if s:
        b = s.get("best")
        rows.append((s["trials"], s["evaluator"], s["feasible_trials"], _f(b["score"]) if b else "none",
                     _f(b["latency_s"] * 1e3, 3) if b else "n/a", _f(b["energy_j"], 4) if b else "n/a",
                     b["hash"][:12] if b else "n/a"))
    lines += [_table(("trials", "evaluator", "feasible", "best_score", "latency_ms", "energy_j", "arch"), rows), ""]
    if s and s.get("infeasible"):
        lines += ["Infeasible: " + s["infeasible"], ""]

    lines += ["## Zoo (max score)", ""]
    rows = []
    for i, c in enumerate(data.get("zoo", [])):
        ops = " ".join(_short(layer) for layer in c["arch"]["layers"])
        rows.append((i + 1, c["hash"][:12], _f(c["score"]), _f(c["acc"]), _f(c["latency_s"] * 1e3, 3),
                     _f(c["energy_j"], 4), ops))
    lines += [_table(("rank", "arch", "score", "acc", "latency_ms", "energy_j", "ops"), rows), ""]

    lines += ["## Runs", ""]
    rows = [_run_row(r) for r in data.get("runs", [])]
    lines += [_table(RUN_COLUMNS, rows), ""]
    return "\n".join(lines)


def _short(layer: dict) -> str:
    op = layer["op"]
    if op == "sample":
        return f"S{layer['k']}"
    if op == "aggregate":
        return "A" + layer["aggr"][:2]
    if op == "combine":
        return f"C{layer['out_dim']}"
    return {"communicate": "<>", "global_pooling": "GP", "connect": "+"}[op]


def _run_row(r: dict) -> tuple:
    thr = r.get("throttle_bps")
    return (r.get("name", ""), r.get("arch_hash", "")[:12], r["num_batches"], r.get("pipeline_depth", ""),
            _f(thr / 1e6, 1) if thr else "none", _f(r["mean_latency_s"] * 1e3, 3), _f(r["throughput_ips"], 2),
            r["bytes_sent"], len(r["failed"]))


def _csv(headers, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    w.writerows(rows)
    return buf.getvalue()


def write_csvs(data: dict, out_dir: Path, trace: list[dict] | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    preds = [[p[c] for c in PRED_COLUMNS] for p in data.get("predictors", [])]
    (out_dir / "predictors.csv").write_text(_csv(PRED_COLUMNS, preds))
    written.append(out_dir / "predictors.csv")
    rows = [[r.get(c) for c in TRACE_COLUMNS] for r in (trace or []) if "score" in r and "iter" in r
            and r.get("stage", 1) == 1]
    (out_dir / "search_trace.csv").write_text(_csv(TRACE_COLUMNS, rows))
    written.append(out_dir / "search_trace.csv")
    zoo_rows = [[c["hash"][:12], c["latency_s"], c["energy_j"], c["acc"], c["score"]] for c in data.get("zoo", [])]
    (out_dir / "latency_energy.csv").write_text(_csv(("arch", "latency_s", "energy_j", "acc", "score"), zoo_rows))
    written.append(out_dir / "latency_energy.csv")
    runs = [list(_run_row(r)) for r in data.get("runs", [])]
    (out_dir / "runs.csv").write_text(_csv(RUN_COLUMNS, runs))
    written.append(out_dir / "runs.csv")
    return written
