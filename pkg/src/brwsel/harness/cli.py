"""Command-line entry point: ``brwsel run|plot-data|validate-config|list-experiments``."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .experiments import DESCRIPTIONS
from .plotdata import emit_plot_data
from .records import run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brwsel", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, help="override the config's seed list with one seed")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", help="output directory (default: $BRWSEL_OUT, config, ./results)")

    pd = sub.add_parser("plot-data", help="tidy CSV for external plotting")
    pd.add_argument("records", nargs="+", help="JSON-lines result files")
    pd.add_argument("--out", required=True, help="CSV path to write")
    pd.add_argument("--kind", help="require this experiment kind")

    v = sub.add_parser("validate-config", help="check a config without running it")
    v.add_argument("--config", required=True)

    sub.add_parser("list-experiments", help="list the experiment kinds")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "list-experiments":
            for k, d in DESCRIPTIONS.items():
                print(f"{k:26s} {d}")
        elif args.verb == "validate-config":
            cfg = load_config(args.config)
            print(f"ok: {cfg.kind} ({len(cfg.seeds)} seeds, n={cfg.n}) hash {cfg.hash()[:12]}")
        elif args.verb == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seeds([args.seed])
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            paths = run_experiment(cfg, args.out, args.workers)
            print(f"records: {paths['records']}\nsummary: {paths['summary']}")
        elif args.verb == "plot-data":
            n = emit_plot_data(args.records, args.out, args.kind)
            print(f"wrote {n} rows to {args.out}")
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
