"""Run metrics: ledgers, the four headline indicators, and file outputs.

Each indicator lives in exactly one function so its operationalisation can be
audited:

  energy_per_update     joules consumed per local update over a tick window
                        (communication energy included; a flag gives the
                        compute-only variant)
  collab_efficiency     accuracy gain over the isolated baseline per byte
                        exchanged, population level
  adaptation_latency    ticks from a drift event until accuracy returns to
                        within epsilon of its pre-drift trailing mean
  resilience_ratio      surviving-node accuracy under dropout divided by the
                        same nodes' accuracy without dropout

All file outputs use shortest round-trip float formatting, so equal
(config, seed) runs produce byte-identical artifacts.
"""
from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Optional

from .errors import UsageError

CSV_COLUMNS = ["tick", "node", "accuracy", "energy_j", "bytes_tx", "bytes_rx",
               "updates", "events"]
MANIFEST_FORMAT = 1


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.tick, r.node, _fmt(r.accuracy), _fmt(r.energy_j),
                             r.bytes_tx, r.bytes_rx, r.updates, r.events])


def read_metrics_csv(path):
    """Rows as dicts with typed fields; accuracy None where it was absent."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            node = row["node"]
            out.append({
                "tick": int(row["tick"]),
                "node": int(node) if node != "pop" else "pop",
                "accuracy": float(row["accuracy"]) if row["accuracy"] else None,
                "energy_j": float(row["energy_j"]) if row["energy_j"] else 0.0,
                "bytes_tx": int(row["bytes_tx"]),
                "bytes_rx": int(row["bytes_rx"]),
                "updates": int(row["updates"]),
                "events": row["events"],
            })
    return out


def write_events_jsonl(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def write_run_outputs(state, out_dir, config_path: Optional[str] = None) -> None:
    """Write metrics.csv, events.jsonl, config-echo.json and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(state.rows, out / "metrics.csv")
    write_events_jsonl(state.events, out / "events.jsonl")
    with open(out / "config-echo.json", "w", encoding="utf-8") as fh:
        json.dump(state.cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = {
        "format": MANIFEST_FORMAT,
        "name": state.cfg.name,
        "seed": state.cfg.seed,
        "nodes": state.cfg.nodes,
        "ticks": state.cfg.ticks,
        "regime": state.cfg.regime,
        "out_dir": str(out.resolve()),
        "config_path": str(Path(config_path).resolve()) if config_path else None,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _node_rows(rows):
    by_node: dict[int, list] = {}
    for r in rows:
        if r["node"] != "pop":
            by_node.setdefault(r["node"], []).append(r)
    for series in by_node.values():
        series.sort(key=lambda r: r["tick"])
    return by_node


def _as_dicts(rows):
    if rows and not isinstance(rows[0], dict):
        return [{"tick": r.tick, "node": r.node, "accuracy": r.accuracy,
                 "energy_j": r.energy_j, "bytes_tx": r.bytes_tx, "bytes_rx": r.bytes_rx,
                 "updates": r.updates, "events": r.events} for r in rows]
    return rows


def energy_per_update(rows, window=None):
    """Joules per local update over the window, per node plus the population.

    Returns {node: value or None, ..., "pop": value or None}; None marks a
    window with zero updates (the quantity is undefined there, not zero).
    The numerator is all energy consumed in the window, communication
    included; `energy_per_update_compute_only` reads the itemised in-run
    energy log for the compute-only variant.
    """
    rows = _as_dicts(rows)
    by_node = _node_rows(rows)
    out = {}
    total_e = 0.0
    total_u = 0
    for node, series in sorted(by_node.items()):
        if window is not None:
            series = [r for r in series if window[0] <= r["tick"] <= window[1]]
        if len(series) < 1:
            out[node] = None
            continue
        first, last = series[0], series[-1]
        d_updates = last["updates"] - first["updates"]
        d_energy = last["energy_j"] - first["energy_j"]
        if d_updates <= 0:
            out[node] = None
        else:
            out[node] = d_energy / d_updates
            total_e += d_energy
            total_u += d_updates
    out["pop"] = (total_e / total_u) if total_u > 0 else None
    return out


def energy_per_update_compute_only(nodes, window=None):
    """Compute-only variant of energy_per_update over live NodeState logs:
    the numerator keeps only local-step energy."""
    out = {}
    total_e = 0.0
    total_u = 0
    for node in nodes:
        entries = [(t, kind, j) for t, kind, j in node.energy_log
                   if window is None or window[0] <= t <= window[1]]
        steps = [j for _, kind, j in entries if kind == "step"]
        if not steps:
            out[node.node_id] = None
            continue
        out[node.node_id] = sum(steps) / len(steps)
        total_e += sum(steps)
        total_u += len(steps)
    out["pop"] = (total_e / total_u) if total_u > 0 else None
    return out


def final_population_accuracy(rows, nodes=None, time_averaged: bool = False):
    """Mean accuracy over the requested nodes at the last emission (or over
    all emissions with time_averaged)."""
    rows = _as_dicts(rows)
    by_node = _node_rows(rows)
    values = []
    for node, series in sorted(by_node.items()):
        if nodes is not None and node not in nodes:
            continue
        accs = [r["accuracy"] for r in series if r["accuracy"] is not None]
        if not accs:
            continue
        values.append(sum(accs) / len(accs) if time_averaged else accs[-1])
    if not values:
        return None
    return sum(values) / len(values)


def total_bytes(rows) -> int:
    rows = _as_dicts(rows)
    by_node = _node_rows(rows)
    return sum(series[-1]["bytes_tx"] for series in by_node.values() if series)


def collab_efficiency(rows, baseline_rows, time_averaged: bool = False):
    """Accuracy gain over the isolated baseline per byte exchanged.

    None when no bytes were exchanged; negative values are reported as-is
    (harmful collaboration is a signal, not an error).
    """
    acc = final_population_accuracy(rows, time_averaged=time_averaged)
    base = final_population_accuracy(baseline_rows, time_averaged=time_averaged)
    bytes_exchanged = total_bytes(rows)
    if bytes_exchanged == 0 or acc is None or base is None:
        return None
    return (acc - base) / bytes_exchanged


def adaptation_latency(rows, drift_tick: int, epsilon: float = 0.02,
                       pre_window: int = 20):
    """Per-node ticks to recover within epsilon of the pre-drift mean accuracy.

    The reference is the trailing mean over the pre_window ticks before the
    drift. Returns {node: latency or None}; None marks a node that never
    recovered within the run.
    """
    rows = _as_dicts(rows)
    by_node = _node_rows(rows)
    if not by_node:
        raise UsageError("adaptation latency needs metric rows")
    if not any(r["tick"] <= drift_tick for series in by_node.values() for r in series):
        raise UsageError(f"no metric rows at or before drift tick {drift_tick}")
    out = {}
    for node, series in sorted(by_node.items()):
        pre = [r["accuracy"] for r in series
               if drift_tick - pre_window <= r["tick"] <= drift_tick
               and r["accuracy"] is not None]
        post = [(r["tick"], r["accuracy"]) for r in series
                if r["tick"] > drift_tick and r["accuracy"] is not None]
        if not pre or not post:
            out[node] = None
            continue
        target = sum(pre) / len(pre) - epsilon
        latency = None
        for t, acc in post:
            if acc >= target:
                latency = t - drift_tick
                break
        out[node] = latency
    return out


def mean_adaptation_latency(rows, drift_tick: int, run_ticks: int,
                            epsilon: float = 0.02, pre_window: int = 20) -> float:
    """Population mean latency with never-recovered nodes censored at the run
    horizon (used for cross-regime comparisons)."""
    per_node = adaptation_latency(rows, drift_tick, epsilon, pre_window)
    horizon = run_ticks - drift_tick
    vals = [horizon if v is None else v for v in per_node.values()]
    return sum(vals) / len(vals) if vals else float("nan")


def resilience_ratio(dropout_rows, plain_rows, dropped_nodes):
    """Surviving-node final accuracy under dropout over the same nodes' final
    accuracy without dropout. None if every node was dropped."""
    rows = _as_dicts(dropout_rows)
    all_nodes = {r["node"] for r in rows if r["node"] != "pop"}
    survivors = sorted(all_nodes - set(dropped_nodes))
    if not survivors:
        return None
    with_drop = final_population_accuracy(dropout_rows, nodes=set(survivors))
    without = final_population_accuracy(plain_rows, nodes=set(survivors))
    if with_drop is None or without is None or without == 0:
        return None
    return with_drop / without


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = sum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


def report(run_dirs):
    """Aggregate runs into per-metric mean +/- std rows.

    Missing or unreadable directories are listed under "missing" and skipped.
    Returns {"rows": [...], "missing": [...]}.
    """
    summaries = []
    missing = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.exists():
            missing.append(str(d))
            continue
        rows = read_metrics_csv(path)
        summaries.append({
            "dir": str(d),
            "final_accuracy": final_population_accuracy(rows),
            "total_bytes": total_bytes(rows),
            "total_energy_j": max((r["energy_j"] for r in rows if r["node"] == "pop"),
                                  default=0.0),
            "energy_per_update": energy_per_update(rows)["pop"],
        })
    table = []
    for metric in ("final_accuracy", "total_energy_j", "total_bytes", "energy_per_update"):
        mean, std = _mean_std([s[metric] for s in summaries])
        table.append({"metric": metric, "mean": mean, "std": std, "runs": len(summaries)})
    return {"rows": table, "missing": missing, "runs": summaries}


def render_report(result) -> str:
    lines = []
    lines.append(f"{'metric':<20} {'mean':>16} {'std':>16} {'runs':>5}")
    for row in result["rows"]:
        mean = "-" if row["mean"] is None else f"{row['mean']:.6g}"
        std = "-" if row["std"] is None else f"{row['std']:.6g}"
        lines.append(f"{row['metric']:<20} {mean:>16} {std:>16} {row['runs']:>5}")
    for miss in result["missing"]:
        lines.append(f"missing: {miss}")
    return "\n".join(lines)
