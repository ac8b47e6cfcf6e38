"""Tidy plot-ready CSV from result records (no rendering)."""

from __future__ import annotations

import csv

from .experiments import plot_points
from .records import read_records

COLUMNS = ("x", "y", "series", "ci_lo", "ci_hi")


def plot_rows(paths, kind: str | None = None) -> list[dict]:
    records = [r for p in paths for r in read_records(p)]
    if not records:
        raise ValueError("no records found")
    hashes = {r["config_hash"] for r in records}
    if len(hashes) > 1:
        raise ValueError(f"records come from {len(hashes)} different configs; refusing to mix")
    kinds = {r["kind"] for r in records}
    if kind is not None and kinds != {kind}:
        raise ValueError(f"records are of kind {sorted(kinds)}, not {kind!r}")
    rows, seen_ref = [], set()
    for r in records:
        for pt in plot_points(r["kind"], r["cell"], r["metrics"]):
            if pt["series"] == "reference" or pt["series"] == "bound":
                key = (pt["series"], pt["x"])
                if key in seen_ref:
                    continue
                seen_ref.add(key)
            rows.append(pt)
    return rows


def emit_plot_data(paths, out_path, kind: str | None = None) -> int:
    rows = plot_rows(paths, kind)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return len(rows)
