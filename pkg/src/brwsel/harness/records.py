"""Result records (JSON lines), summary CSVs, and the experiment runner."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .. import __version__
from .config import ExperimentConfig, parse_config
from .experiments import cells, run_cell, summary_row

OUT_ENV = "BRWSEL_OUT"


def metrics_hash(metrics: dict) -> str:
    return hashlib.sha256(json.dumps(metrics, sort_keys=True).encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return x.item()
    return x


def make_record(cfg: ExperimentConfig, cell: dict, metrics: dict, wall: float) -> dict:
    metrics = _jsonable(metrics)
    return {"kind": cfg.kind, "config_hash": cfg.hash(), "config": cfg.to_dict(),
            "seed": cell["seed"], "cell": _jsonable(cell), "metrics": metrics,
            "metrics_hash": metrics_hash(metrics), "wall_time": wall, "version": __version__}


def _run_one(args):
    cfg_dict, cell = args
    cfg = parse_config(cfg_dict)
    t0 = time.perf_counter()
    metrics = run_cell(cfg, cell)
    return make_record(cfg, cell, metrics, time.perf_counter() - t0)


def output_dir(cfg: ExperimentConfig, out: str | None = None) -> Path:
    """``--out`` wins, then the environment variable, then the config, then ``./results``."""
    return Path(out or os.environ.get(OUT_ENV) or cfg.out or "results")


def run_experiment(cfg: ExperimentConfig, out: str | None = None, workers: int = 1,
                   echo=print) -> dict:
    """Run every cell, write ``<label>-<hash>.jsonl`` and ``.csv``; return the file paths.

    Records are written as cells finish, in cell order. If a cell fails, the
    partial files keep an ``.incomplete`` suffix and the error is re-raised.
    """
    outdir = output_dir(cfg, out)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.label}-{cfg.hash()[:12]}"
    jpath, cpath = outdir / f"{stem}.jsonl", outdir / f"{stem}.csv"
    jpart = jpath.with_name(jpath.name + ".incomplete")
    cpart = cpath.with_name(cpath.name + ".incomplete")
    for p in (jpath, cpath):
        if p.exists():
            p.unlink()
    tasks = [(cfg.to_dict(), c) for c in cells(cfg)]
    rows = []
    try:
        with open(jpart, "w") as fh:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = pool.map(_run_one, tasks)
                    for rec in results:
                        _emit(fh, rec, rows, echo)
            else:
                for t in tasks:
                    _emit(fh, _run_one(t), rows, echo)
    except BaseException as exc:
        with open(jpart, "a") as fh:
            fh.write(json.dumps({"incomplete": True, "config_hash": cfg.hash(),
                                 "error": f"{type(exc).__name__}: {exc}"}) + "\n")
        _write_csv(cpart, rows)
        raise
    _write_csv(cpath, rows)
    jpart.replace(jpath)
    return {"records": str(jpath), "summary": str(cpath)}


def _emit(fh, rec, rows, echo):
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()
    row = summary_row(rec["kind"], rec["cell"], rec["metrics"])
    rows.append(row)
    if echo is not None:
        ref = rec["metrics"].get("reference", rec["metrics"].get("reference_max"))
        shown = {k: v for k, v in row.items() if isinstance(v, (int, float)) and k != "seed"}
        line = ", ".join(f"{k}={_fmt(v)}" for k, v in list(shown.items())[:8])
        echo(f"[{rec['kind']}] seed={rec['seed']} {line}"
             + (f" | reference {ref:.6g}" if isinstance(ref, float) else ""))


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _write_csv(path, rows):
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_records(path) -> list[dict]:
    """Parse a JSON-lines file; a malformed line raises with its line number."""
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {i}: malformed record ({exc.msg})") from exc
            if not isinstance(rec, dict) or "metrics" not in rec or "kind" not in rec:
                if isinstance(rec, dict) and rec.get("incomplete"):
                    raise ValueError(f"{path}: line {i}: results are marked incomplete")
                raise ValueError(f"{path}: line {i}: not a result record")
            out.append(rec)
    return out
