"""Replicated strategy sweeps, summary curves and CSV export.

Every replication draws its cohort, split and seed set from its own
``SeedSequence`` child of the master seed, and every strategy inside a
replication sees those same objects, so curves are paired. Results do not
depend on how many worker processes are used.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .agent import PolicyNet
from .config import ExperimentConfig
from .loop import STRATEGIES, RunResult, run_episode, seed_ledgers
from .synthcohort import generate_cohort, split_cohort

log = logging.getLogger(__name__)

METRICS = ("auc", "f1", "tpr", "ppv", "prob_mse", "c_index")
RUN_COLUMNS = ("run_id", "strategy", "iteration", "n_labeled", "w_unc", "w_div", "w_qbc",
               "reward_raw", "reward_norm", "auc", "f1", "tpr", "ppv", "prob_mse", "c_index",
               "threshold_used")
SUBGROUP_COLUMNS = ("run_id", "strategy", "iteration", "group", "auc", "f1", "tpr", "ppv",
                    "prob_mse", "c_index", "threshold_used")
SUMMARY_COLUMNS = ("strategy", "metric", "iteration", "mean", "ci_low", "ci_high", "n")
COEF_COLUMNS = ("run_id", "strategy", "iteration", "term", "value")
Z95 = 1.96


@dataclass
class RunRecord:
    run_id: int
    replication: int
    strategy: str
    cohort_digest: str
    result: RunResult | None
    error: str | None = None


@dataclass
class SummaryCurve:
    strategy: str
    metric: str
    iteration: np.ndarray
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: np.ndarray


def resolve_threads(threads: int | None = None) -> int:
    n = threads if threads is not None else (os.cpu_count() or 1)
    cap = os.environ.get("RELEAP_THREADS")
    if cap:
        n = min(n, int(cap)) if threads is not None else int(cap)
    return max(int(n), 1)


def replication_streams(master_seed: int, replication: int) -> list:
    """Child seeds: cohort, split, seed set, then one per entry of STRATEGIES."""
    root = np.random.SeedSequence(master_seed, spawn_key=(replication,))
    return root.spawn(3 + len(STRATEGIES))


def prepare_replication(cfg: ExperimentConfig, r: int):
    streams = replication_streams(cfg.master_seed, r)
    cohort = generate_cohort(cfg.cohort, np.random.default_rng(streams[0]))
    split = split_cohort(cohort, cfg.valid_frac, np.random.default_rng(streams[1]))
    seeds = seed_ledgers(cohort, split, cfg.loop, np.random.default_rng(streams[2]))
    subgroup = None
    if cfg.subgroup_column is not None:
        subgroup = cohort.x2[:, cfg.subgroup_column] > 0
    return cohort, split, seeds, subgroup, streams


def _run_one(cfg, r, strategy, cohort, split, seeds, subgroup, streams, policy=None):
    rng = np.random.default_rng(streams[3 + STRATEGIES.index(strategy)])
    loop_cfg = replace(cfg.loop, strategy=strategy)
    run_id = r * len(cfg.strategies) + cfg.strategies.index(strategy)
    try:
        result = run_episode(cohort, split, loop_cfg, rng, policy=policy, seeds=seeds,
                             subgroup=subgroup)
        return RunRecord(run_id, r, strategy, cohort.digest(), result)
    except Exception as exc:  # recorded and excluded from summaries
        return RunRecord(run_id, r, strategy, cohort.digest(), None,
                         f"{type(exc).__name__}: {exc}")


def run_replication(cfg: ExperimentConfig, r: int, skip=()) -> list[RunRecord]:
    with threadpool_limits(1):
        cohort, split, seeds, subgroup, streams = prepare_replication(cfg, r)
        return [_run_one(cfg, r, s, cohort, split, seeds, subgroup, streams)
                for s in cfg.strategies if s not in skip]


def _job(args):
    cfg, r, skip = args
    return run_replication(cfg, r, skip)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> list[RunRecord]:
    """All (replication, strategy) runs, ordered by run_id."""
    cfg.validate()
    workers = resolve_threads(threads)
    skip = ("releap",) if cfg.warm_start else ()
    jobs = [(cfg, r, skip) for r in range(cfg.n_replications)]
    if workers == 1:
        batches = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    records = [rec for batch in batches for rec in batch]

    if cfg.warm_start and "releap" in cfg.strategies:
        # one policy trained sequentially through the replications
        policy = None
        with threadpool_limits(1):
            for r in range(cfg.n_replications):
                cohort, split, seeds, subgroup, streams = prepare_replication(cfg, r)
                if policy is None:
                    init_rng = np.random.default_rng(streams[3 + STRATEGIES.index("releap")])
                    policy = PolicyNet(init_rng, hidden=cfg.loop.ppo.hidden)
                records.append(_run_one(cfg, r, "releap", cohort, split, seeds, subgroup,
                                        streams, policy=policy))
    records.sort(key=lambda rec: rec.run_id)
    failed = [rec for rec in records if rec.error]
    if failed:
        log.warning("%d of %d runs failed; first: %s", len(failed), len(records), failed[0].error)
    return records


# -- rows -------------------------------------------------------------------------

def fmt_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".9g")


def _rounded(value):
    """The value as it reads back from CSV, so summaries match the files exactly."""
    if value is None:
        return None
    return float(fmt_value(value))


def _metric_fields(report) -> dict:
    return {k: _rounded(getattr(report, k)) for k in METRICS + ("threshold_used",)}


def run_rows(records: list[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        if rec.result is None:
            continue
        for lg in rec.result.logs:
            w = lg.weights if lg.weights is not None and len(lg.weights) == 3 else (None,) * 3
            row = {"run_id": rec.run_id, "strategy": rec.strategy, "iteration": lg.iteration,
                   "n_labeled": lg.n_labeled,
                   "w_unc": _rounded(w[0]), "w_div": _rounded(w[1]), "w_qbc": _rounded(w[2]),
                   "reward_raw": _rounded(lg.reward_raw), "reward_norm": _rounded(lg.reward_norm)}
            row.update(_metric_fields(lg.report))
            rows.append(row)
    return rows


def subgroup_rows(records: list[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        if rec.result is None:
            continue
        for lg in rec.result.logs:
            for g, report in sorted((lg.subgroups or {}).items()):
                row = {"run_id": rec.run_id, "strategy": rec.strategy,
                       "iteration": lg.iteration, "group": g}
                row.update(_metric_fields(report))
                rows.append(row)
    return rows


def coefficient_rows(records: list[RunRecord], term_names: list[str]) -> list[dict]:
    rows = []
    for rec in records:
        if rec.result is None:
            continue
        for lg in rec.result.logs:
            if lg.coefficients is None:
                continue
            for name, value in zip(term_names, lg.coefficients):
                rows.append({"run_id": rec.run_id, "strategy": rec.strategy,
                             "iteration": lg.iteration, "term": name, "value": _rounded(value)})
    return rows


# -- summaries ------------------------------------------------------------------------

def mean_ci(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval (sample sd; zero width for n = 1)."""
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return mean, mean - half, mean + half


def summarize(rows: list[dict], subgroups: list[dict] | None = None) -> list[SummaryCurve]:
    buckets = defaultdict(lambda: defaultdict(list))
    order = []
    for row in rows:
        for m in METRICS:
            if row.get(m) is not None:
                key = (row["strategy"], m)
                if key not in buckets:
                    order.append(key)
                buckets[key][int(row["iteration"])].append(row[m])
    for row in subgroups or ():
        for m in METRICS:
            if row.get(m) is not None:
                key = (row["strategy"], f"{m}_g{int(row['group'])}")
                if key not in buckets:
                    order.append(key)
                buckets[key][int(row["iteration"])].append(row[m])

    metric_rank = {}
    for _, m in order:
        metric_rank.setdefault(m, len(metric_rank))
    strategy_rank = {}
    for s, _ in order:
        strategy_rank.setdefault(s, len(strategy_rank))

    curves = []
    for key in sorted(order, key=lambda k: (strategy_rank[k[0]], metric_rank[k[1]])):
        by_it = buckets[key]
        its = sorted(by_it)
        stats = [mean_ci(by_it[i]) for i in its]
        curves.append(SummaryCurve(
            strategy=key[0], metric=key[1], iteration=np.array(its),
            mean=np.array([s[0] for s in stats]), ci_low=np.array([s[1] for s in stats]),
            ci_high=np.array([s[2] for s in stats]),
            n=np.array([len(by_it[i]) for i in its])))
    return curves


def summary_rows(curves: list[SummaryCurve]) -> list[dict]:
    rows = []
    for c in curves:
        for i in range(len(c.iteration)):
            rows.append({"strategy": c.strategy, "metric": c.metric,
                         "iteration": int(c.iteration[i]), "mean": c.mean[i],
                         "ci_low": c.ci_low[i], "ci_high": c.ci_high[i], "n": int(c.n[i])})
    return rows


def curves_from_summary_rows(rows: list[dict]) -> list[SummaryCurve]:
    grouped = defaultdict(list)
    order = []
    for row in rows:
        key = (row["strategy"], row["metric"])
        if key not in grouped:
            order.append(key)
        grouped[key].append(row)
    curves = []
    for key in order:
        rs = sorted(grouped[key], key=lambda r: int(r["iteration"]))
        curves.append(SummaryCurve(
            strategy=key[0], metric=key[1],
            iteration=np.array([int(r["iteration"]) for r in rs]),
            mean=np.array([float(r["mean"]) for r in rs]),
            ci_low=np.array([float(r["ci_low"]) for r in rs]),
            ci_high=np.array([float(r["ci_high"]) for r in rs]),
            n=np.array([int(r["n"]) for r in rs])))
    return curves


# -- CSV ----------------------------------------------------------------------------

def write_csv(path: Path, columns, rows) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([fmt_value(row.get(c)) if not isinstance(row.get(c), str) else row[c]
                            for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: Path) -> list[dict]:
    """Rows with empty cells as None and numeric cells as float (ints stay int-valued)."""
    text_cols = {"strategy", "metric", "term"}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in text_cols:
                    parsed[k] = v
                elif v == "":
                    parsed[k] = None
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out


def export_csv(records: list[RunRecord], curves: list[SummaryCurve], out_dir,
               cfg: ExperimentConfig | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        write_csv(out / "runs.csv", RUN_COLUMNS, run_rows(records)),
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows(curves)),
    ]
    if cfg is not None and cfg.subgroup_column is not None:
        written.append(write_csv(out / "runs_subgroup.csv", SUBGROUP_COLUMNS,
                                 subgroup_rows(records)))
    if cfg is not None and cfg.verbose:
        terms = ["S"] + [f"x2_{j}" for j in range(cfg.cohort.d_x2)]
        if cfg.loop.mode == "logistic":
            terms.append("intercept")
        written.append(write_csv(out / "coefficients.csv", COEF_COLUMNS,
                                 coefficient_rows(records, terms)))
    return written


def summarize_dir(in_dir) -> list[SummaryCurve]:
    """Recompute summary.csv from runs.csv (and runs_subgroup.csv when present)."""
    in_dir = Path(in_dir)
    rows = read_csv(in_dir / "runs.csv")
    sub_path = in_dir / "runs_subgroup.csv"
    subs = read_csv(sub_path) if sub_path.exists() else None
    curves = summarize(rows, subs)
    write_csv(in_dir / "summary.csv", SUMMARY_COLUMNS, summary_rows(curves))
    return curves
