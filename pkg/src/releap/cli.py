"""Command line entry point: ``releap run | summarize | plot``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config, serialize_config
from .errors import ConfigError
from .harness import (curves_from_summary_rows, export_csv, read_csv, run_experiment, run_rows,
                      subgroup_rows, summarize, summarize_dir)
from .plots import emit_plots

log = logging.getLogger("releap")


def _build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    loop = cfg.loop
    if args.mode:
        loop = replace(loop, mode=args.mode)
    if args.reward_mode:
        loop = replace(loop, reward_mode=args.reward_mode)
    if args.no_mirror:
        loop = replace(loop, mirror_validation=False)
    changes = {"loop": loop}
    if args.strategies:
        changes["strategies"] = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    if args.runs is not None:
        changes["n_replications"] = args.runs
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    if args.verbose:
        changes["verbose"] = True
    return replace(cfg, **changes).validate()


def cmd_run(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))
    log.info("running %d replications x %d strategies -> %s", cfg.n_replications,
             len(cfg.strategies), out)
    records = run_experiment(cfg, threads=args.threads)
    curves = summarize(run_rows(records),
                       subgroup_rows(records) if cfg.subgroup_column is not None else None)
    for path in export_csv(records, curves, out, cfg):
        log.info("wrote %s", path)
    failed = [r for r in records if r.error]
    for rec in failed:
        log.error("run %d (%s) failed: %s", rec.run_id, rec.strategy, rec.error)
    return 1 if failed else 0


def cmd_summarize(args) -> int:
    curves = summarize_dir(args.indir)
    for c in curves:
        if c.metric in ("auc", "c_index") and len(c.mean):
            print(f"{c.strategy:12s} {c.metric:8s} final {c.mean[-1]:.4f} "
                  f"[{c.ci_low[-1]:.4f}, {c.ci_high[-1]:.4f}] n={int(c.n[-1])}")
    return 0


def cmd_plot(args) -> int:
    indir = Path(args.indir)
    summary = indir / "summary.csv"
    curves = curves_from_summary_rows(read_csv(summary)) if summary.exists() else summarize_dir(indir)
    for path in emit_plots(curves, indir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="releap", description="Phenotype label-correction experiments")
    p.add_argument("--log-level", default="INFO")
    # also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run a replicated strategy sweep")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--mode", choices=("logistic", "survival"))
    r.add_argument("--strategies", help="comma-separated strategy names")
    r.add_argument("--runs", type=int, help="replications per strategy")
    r.add_argument("--seed", type=int, help="master seed")
    r.add_argument("--out", help="output directory")
    r.add_argument("--no-mirror", action="store_true", help="disable validation mirroring")
    r.add_argument("--reward-mode", choices=("shaped", "lookahead"))
    r.add_argument("--verbose", action="store_true", help="also write coefficients.csv")
    r.add_argument("--threads", type=int, help="worker processes (RELEAP_THREADS caps this)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", parents=[common], help="recompute summary.csv from runs.csv")
    s.add_argument("--in", dest="indir", required=True)
    s.set_defaults(func=cmd_summarize)

    pl = sub.add_parser("plot", parents=[common], help="write one SVG learning curve per metric")
    pl.add_argument("--in", dest="indir", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
