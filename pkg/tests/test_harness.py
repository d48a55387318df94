import csv
import math
import statistics
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest

from releap import harness
from releap.cli import main
from releap.config import ExperimentConfig, load_config
from releap.harness import (RUN_COLUMNS, SUMMARY_COLUMNS, SummaryCurve, export_csv, mean_ci,
                            replication_streams, run_experiment, run_rows, summarize)
from releap.loop import LoopConfig
from releap.plots import emit_plots, render_svg
from releap.synthcohort import CohortConfig

SMALL = ExperimentConfig(cohort=CohortConfig(n=300), loop=LoopConfig(n_iterations=3, batch_size=20),
                         n_replications=2)


@pytest.fixture(scope="module")
def small_records():
    return run_experiment(SMALL, threads=1)


def test_streams_are_counter_based():
    a = replication_streams(2024, 3)
    b = replication_streams(2024, 3)
    assert [s.generate_state(2).tolist() for s in a] == [s.generate_state(2).tolist() for s in b]
    c = replication_streams(2024, 4)
    assert a[0].generate_state(2).tolist() != c[0].generate_state(2).tolist()


def test_paired_cohorts(small_records):
    by_rep = defaultdict(set)
    for rec in small_records:
        by_rep[rec.replication].add(rec.cohort_digest)
    assert all(len(d) == 1 for d in by_rep.values())
    assert by_rep[0] != by_rep[1]
    assert [r.run_id for r in small_records] == list(range(14))


def test_row_count(small_records):
    rows = run_rows(small_records)
    assert len(rows) == 7 * 2 * (3 + 1)


def test_single_oracle_run_is_flat():
    cfg = replace(SMALL, strategies=("oracle",), n_replications=1)
    curves = summarize(run_rows(run_experiment(cfg, threads=1)))
    auc = next(c for c in curves if c.metric == "auc")
    assert len(set(auc.mean.tolist())) == 1 and np.all(auc.ci_low == auc.ci_high)


def test_mean_ci_examples():
    mean, lo, hi = mean_ci([0.7, 0.8])
    assert mean == pytest.approx(0.75)
    assert hi - mean == pytest.approx(1.96 * statistics.stdev([0.7, 0.8]) / math.sqrt(2))
    assert hi - mean == pytest.approx(0.098, abs=5e-4)
    assert mean_ci([0.4]) == (0.4, 0.4, 0.4)
    m, lo, hi = mean_ci([0.3] * 5)
    assert lo == hi == m


def test_empty_results_write_headers_only(tmp_path):
    export_csv([], [], tmp_path)
    assert (tmp_path / "runs.csv").read_text() == ",".join(RUN_COLUMNS) + "\n"
    assert (tmp_path / "summary.csv").read_text() == ",".join(SUMMARY_COLUMNS) + "\n"


def test_unwritable_directory_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as err:
        export_csv([], [], blocker)
    assert "file" in str(err.value)


def test_csv_format_and_independent_summary(tmp_path, small_records):
    curves = summarize(run_rows(small_records))
    export_csv(small_records, curves, tmp_path)
    with open(tmp_path / "runs.csv") as fh:
        runs = list(csv.DictReader(fh))
    with open(tmp_path / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert list(runs[0]) == list(RUN_COLUMNS)
    # absent metrics are empty cells; numbers carry at most 9 significant digits
    assert all(r["c_index"] == "" for r in runs)
    assert all(r["w_unc"] == "" for r in runs if r["iteration"] == "0")
    for r in runs:
        if r["auc"]:
            assert len(r["auc"].replace("0.", "", 1).lstrip("0").replace(".", "")) <= 9

    groups = defaultdict(list)
    for r in runs:
        for m in ("auc", "f1", "tpr", "ppv", "prob_mse"):
            if r[m]:
                groups[(r["strategy"], m, int(r["iteration"]))].append(float(r[m]))
    assert len(summary) == len(groups)
    for s in summary:
        vals = groups[(s["strategy"], s["metric"], int(s["iteration"]))]
        assert abs(float(s["mean"]) - statistics.fmean(vals)) <= 1e-9
        half = 1.96 * statistics.stdev(vals) / math.sqrt(len(vals))
        # CSV keeps 9 significant digits
        expected = statistics.fmean(vals) + half
        assert abs(float(s["ci_high"]) - expected) <= 5e-9 * max(1.0, abs(expected))
        assert int(s["n"]) == len(vals)


def test_rerun_is_byte_identical_across_workers(tmp_path, small_records):
    again = run_experiment(SMALL, threads=2)
    export_csv(small_records, summarize(run_rows(small_records)), tmp_path / "a")
    export_csv(again, summarize(run_rows(again)), tmp_path / "b")
    for name in ("runs.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("RELEAP_THREADS", "2")
    assert harness.resolve_threads(8) == 2 and harness.resolve_threads() == 2
    monkeypatch.delenv("RELEAP_THREADS")
    assert harness.resolve_threads(3) == 3


def test_failed_runs_are_recorded_and_excluded(monkeypatch):
    real = harness.run_episode

    def flaky(cohort, split, cfg, rng, **kw):
        if cfg.strategy == "qbc":
            raise FloatingPointError("boom")
        return real(cohort, split, cfg, rng, **kw)

    monkeypatch.setattr(harness, "run_episode", flaky)
    cfg = replace(SMALL, strategies=("random", "qbc"), n_replications=1)
    records = run_experiment(cfg, threads=1)
    assert [r.error is None for r in records] == [True, False]
    assert "boom" in records[1].error
    assert {row["strategy"] for row in run_rows(records)} == {"random"}


def test_warm_start_carries_policy():
    cfg = replace(SMALL, strategies=("releap", "random"), warm_start=True)
    records = run_experiment(cfg, threads=1)
    assert [r.strategy for r in records] == ["releap", "random"] * 2
    assert all(r.error is None for r in records)


def test_subgroup_and_coefficient_files(tmp_path):
    cfg = replace(SMALL, strategies=("random",), n_replications=1, subgroup_column=0,
                  verbose=True)
    records = run_experiment(cfg, threads=1)
    rows = run_rows(records)
    curves = summarize(rows, harness.subgroup_rows(records))
    paths = export_csv(records, curves, tmp_path, cfg)
    assert {p.name for p in paths} == {"runs.csv", "summary.csv", "runs_subgroup.csv",
                                       "coefficients.csv"}
    assert {c.metric for c in curves} >= {"auc_g0", "auc_g1"}
    coef = list(csv.DictReader(open(tmp_path / "coefficients.csv")))
    assert coef[0]["term"] == "S" and len(coef) == 4 * 6


# -- plots -------------------------------------------------------------------------

def _toy_curve(strategy="releap"):
    return SummaryCurve(strategy=strategy, metric="auc", iteration=np.array([0, 1, 2]),
                        mean=np.array([0.70, 0.74, 0.80]), ci_low=np.array([0.65, 0.70, 0.77]),
                        ci_high=np.array([0.75, 0.78, 0.83]), n=np.array([5, 5, 5]))


def _points(attr):
    return [tuple(map(float, p.split(","))) for p in attr.split()]


def test_svg_is_wellformed_with_one_line():
    root = ET.fromstring(render_svg("auc", [_toy_curve()]))
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 1
    labels = [t.text for t in root.iter(f"{ns}text")]
    assert "iteration" in labels and "auc" in labels and "releap" in labels


def test_band_matches_ci_under_axis_map():
    c = _toy_curve()
    root = ET.fromstring(render_svg("auc", [c]))
    ns = "{http://www.w3.org/2000/svg}"
    band = _points(root.find(f"{ns}polygon").get("points"))
    line = _points(root.find(f"{ns}polyline").get("points"))
    values = np.concatenate([c.ci_high, c.ci_low[::-1], c.mean])
    pix = np.array([p[1] for p in band] + [p[1] for p in line])
    # one affine map value -> pixel must explain every vertex
    design = np.column_stack([values, np.ones_like(values)])
    coef, *_ = np.linalg.lstsq(design, pix, rcond=None)
    assert coef[0] < 0
    assert np.max(np.abs(design @ coef - pix)) < 0.1
    xs = [p[0] for p in band[:3]]
    assert xs == [p[0] for p in line] and xs == sorted(xs)


def test_emit_plots_one_file_per_metric(tmp_path):
    curves = [_toy_curve("a"), _toy_curve("b"), replace(_toy_curve("a"), metric="f1")]
    paths = emit_plots(curves, tmp_path)
    assert sorted(p.name for p in paths) == ["curve_auc.svg", "curve_f1.svg"]
    root = ET.parse(tmp_path / "curve_auc.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


# -- CLI ------------------------------------------------------------------------------

def test_cli_run_summarize_plot(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text("n = 300\nbatch_size = 20\nn_iterations = 2\n")
    out = tmp_path / "out"
    code = main(["run", "--config", str(cfg_path), "--strategies", "random,oracle", "--runs", "2",
                 "--seed", "5", "--out", str(out), "--threads", "1", "--log-level", "WARNING"])
    assert code == 0
    cfg = load_config(out / "config.txt")
    assert cfg.master_seed == 5 and cfg.strategies == ("random", "oracle")
    assert cfg.cohort.n == 300 and cfg.output_dir == str(out)
    before = (out / "summary.csv").read_bytes()
    assert main(["summarize", "--in", str(out)]) == 0
    assert (out / "summary.csv").read_bytes() == before
    assert "random" in capsys.readouterr().out
    assert main(["plot", "--in", str(out)]) == 0
    assert (out / "curve_auc.svg").exists()


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size = 0\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "batch_size" in capsys.readouterr().err
    assert main(["summarize", "--in", str(tmp_path / "missing")]) != 0
    assert main(["run", "--strategies", "nope", "--out", str(tmp_path / "o")]) != 0
