"""Aggregate per-episode reports into plot-ready tables."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .adaptation import read_steps, selection_histogram


class NoReports(FileNotFoundError):
    pass


def load_reports(report_dir: str | Path) -> list[dict]:
    """Every ``*.summary.json`` under ``report_dir`` with its step log attached."""
    out = []
    for path in sorted(Path(report_dir).rglob("*.summary.json")):
        summary = json.loads(path.read_text("utf-8"))
        steps_path = path.with_name(path.name.replace(".summary.json", ".steps.jsonl"))
        summary["_stem"] = path.name[: -len(".summary.json")]
        summary["_steps"] = read_steps(steps_path) if steps_path.exists() else None
        out.append(summary)
    if not out:
        raise NoReports(f"no reports found under {report_dir}")
    return out


def recomputed_fraction(steps: list[dict]) -> float:
    n = sum(s["batch_size"] for s in steps)
    return sum(s["n_selected"] for s in steps) / n if n else 0.0


def _group_key(r: dict) -> tuple[str, str, str]:
    m = r.get("meta", {})
    return m.get("method", "?"), m.get("scenario", "?"), m.get("sweep", "")


def aggregate(reports: list[dict]) -> dict[str, list[dict]]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in reports:
        groups[_group_key(r)].append(r)
    acc_rows, sel_rows, bucket_rows = [], [], []
    for (method, scenario, sweep), rs in sorted(groups.items()):
        acc = np.array([r["accuracy"] for r in rs])
        frac = np.array([recomputed_fraction(r["_steps"]) if r["_steps"] is not None
                         else r["fraction_selected"] for r in rs])
        base = {"method": method, "scenario": scenario, "sweep": sweep, "n_reports": len(rs)}
        acc_rows.append({**base, "accuracy_mean": float(acc.mean()),
                         "accuracy_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                         "collapse_flagged": int(sum(r.get("collapse_flagged", False) for r in rs))})
        sel_rows.append({**base, "fraction_selected_mean": float(frac.mean()),
                         "fraction_selected_std": float(frac.std(ddof=1)) if len(frac) > 1 else 0.0})
        for r in rs:
            hist = selection_histogram(r["class_selected"])
            for b in hist["buckets"]:
                bucket_rows.append({**base, "report": r["_stem"], "bucket": b["label"],
                                    "classes": b["classes"]})
    return {"accuracy": acc_rows, "selection": sel_rows, "buckets": bucket_rows}


def write_tables(tables: dict[str, list[dict]], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, rows in tables.items():
        path = out_dir / f"{name}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            if rows:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                writer.writeheader()
                writer.writerows(rows)
        paths[name] = path
    return paths


def format_accuracy_table(rows: list[dict]) -> str:
    lines = [f"{'method':<14} {'scenario':<12} {'sweep':<24} {'n':>3}  accuracy"]
    for r in rows:
        lines.append(f"{r['method']:<14} {r['scenario']:<12} {r['sweep'][:24]:<24} {r['n_reports']:>3}  "
                     f"{100 * r['accuracy_mean']:6.2f} +- {100 * r['accuracy_std']:5.2f}")
    return "\n".join(lines)
