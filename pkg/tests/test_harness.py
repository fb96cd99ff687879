import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sourcerer.harness import (ExperimentConfig, RunResult, aggregate, emit_reports, interpolate_accuracy,
                               interpolate_run, metric_report, run_experiment, write_raw_csv)

TINY_SPEC = dict(n_classes=3, n_bands=2, n_timesteps=10, source_polygons_per_class=3,
                 target_train_polygons_per_class=3, target_test_polygons_per_class=2, polygon_size_mean=8,
                 temporal_shift=2.0)


def tiny_config(**kw):
    base = dict(spec=TINY_SPEC, methods=["naive", "sourcerer", "target-only"], schedule=[1, 2], repeats=2,
                include_zero=False, grad_updates=8, batch_size=16, model={"conv_filters": 2, "fc_units": 4},
                queries=[0, 10, 20, 40])
    base.update(kw)
    return ExperimentConfig(**base)


def brute_force(truth, pred, n_classes):
    """Independent recount with exact fractions."""
    n = len(truth)
    correct = sum(1 for t, p in zip(truth, pred) if t == p)
    f1 = []
    for c in range(n_classes):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else Fraction(0))
    return Fraction(correct, n), f1


def test_metrics_match_brute_force_recount():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        truth, pred = rng.integers(0, c, n), rng.integers(0, c, n)
        rep = metric_report(truth, pred, c)
        acc, f1 = brute_force(truth.tolist(), pred.tolist(), c)
        assert rep.accuracy == float(acc)
        assert [float(v) for v in f1] == pytest.approx(rep.f1.tolist(), abs=1e-15)
        assert rep.confusion.sum() == n
        assert rep.accuracy == np.trace(rep.confusion) / n


def test_metric_examples():
    assert metric_report([0, 1, 1], [0, 0, 1], 2).accuracy == pytest.approx(2 / 3)
    assert metric_report([0, 1, 0, 1], [0, 1, 0, 1], 2).macro_f1 == 1.0
    # class 0: predicted twice, right once -> precision 0.5; its single instance is found -> recall 1
    rep = metric_report([0, 1, 1], [0, 0, 1], 2)
    assert rep.precision[0] == 0.5 and rep.recall[0] == 1.0
    assert rep.f1[0] == pytest.approx(0.6667, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
def test_macro_f1_bounds_and_union(pairs):
    truth, pred = zip(*pairs)
    rep = metric_report(truth, pred, 6)
    assert 0.0 <= rep.macro_f1 <= 1.0
    assert rep.macro_f1 <= rep.f1.max() + 1e-12
    assert set(rep.present) == set(truth) | set(pred)
    assert 5 not in rep.present


def test_metric_errors():
    with pytest.raises(ValueError, match="empty"):
        metric_report([], [], 3)
    with pytest.raises(ValueError):
        metric_report([0, 3], [0, 0], 3)


def test_interpolation_examples():
    vals, flags = interpolate_run([(100, 0.6), (200, 0.8)], [150, 100, 200, 50, 250])
    assert vals[0] == 0.7
    assert vals[1] == 0.6 and vals[2] == 0.8
    assert vals[3] == 0.6 and vals[4] == 0.8
    assert flags.tolist() == [False, False, False, True, True]
    with pytest.raises(ValueError):
        interpolate_run([(100, 0.6)], [100])
    with pytest.raises(ValueError):
        interpolate_run([(200, 0.6), (100, 0.8)], [150])


def test_interpolation_averages_runs():
    runs = [[(0, 0.5), (100, 0.7)], [(0, 0.3), (50, 0.5), (200, 0.9)]]
    res = interpolate_accuracy(runs, [0, 50, 100, 300])
    assert res.values[0] == pytest.approx(0.4)
    assert res.values[1] == pytest.approx((0.6 + 0.5) / 2)
    assert res.clamped.tolist() == [False, False, False, True]
    np.testing.assert_allclose(res.values, res.per_run.mean(axis=0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=5),
       st.lists(st.floats(-10, 400), min_size=1, max_size=6))
def test_aggregation_commutes(accs, queries):
    xs = [0, 100, 300]
    runs = [list(zip(xs, a)) for a in accs]
    res = interpolate_accuracy(runs, queries)
    mean_curve = [(x, float(np.mean([a[i] for a in accs]))) for i, x in enumerate(xs)]
    direct, _ = interpolate_run(mean_curve, queries)
    np.testing.assert_allclose(res.values, direct, atol=1e-12)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        tiny_config(schedule=[2, 2])
    with pytest.raises(ValueError):
        tiny_config(repeats=0)
    with pytest.raises(ValueError):
        tiny_config(methods=["magic"])
    with pytest.raises(ValueError):
        tiny_config(seeds=[1])
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"spec": TINY_SPEC, "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        ExperimentConfig.from_json(path)


@pytest.fixture(scope="module")
def sweep():
    return run_experiment(tiny_config())


def test_run_counting(sweep):
    # schedule {1,2} x 2 repeats x 3 methods
    assert len(sweep) == 12
    assert all(r.ok for r in sweep)
    assert {(r.method, r.repeat, r.polygons) for r in sweep} == {
        (m, r, p) for m in ("naive", "sourcerer", "target-only") for r in (0, 1) for p in (1, 2)}
    assert all(0 <= r.accuracy <= 1 and all(0 <= f <= 1 for f in r.f1) for r in sweep)


def test_raw_csv_is_deterministic(sweep, tmp_path):
    again = run_experiment(tiny_config())
    write_raw_csv(sweep, tmp_path / "a.csv")
    write_raw_csv(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_quantity_zero_rows_equal_source_only():
    res = run_experiment(tiny_config(methods=["source-only", "naive", "finetune", "sourcerer"], schedule=[1],
                                     repeats=1, include_zero=True))
    zero = {r.method: r for r in res if r.polygons == 0}
    so = zero["source-only"]
    for m in ("naive", "finetune", "sourcerer"):
        assert zero[m].accuracy == so.accuracy and zero[m].f1 == so.f1 and zero[m].n_t == 0


def test_failed_runs_are_recorded_and_excluded(tmp_path, caplog):
    # 9 target polygons exist; asking for 50 fails without stopping the sweep
    res = run_experiment(tiny_config(methods=["naive"], schedule=[1, 2, 50], repeats=1))
    bad = [r for r in res if not r.ok]
    assert len(res) == 3 and len(bad) == 1 and "50" in bad[0].error
    paths = emit_reports(res, tmp_path, [0, 10])
    rows = list(csv.DictReader(open(paths["raw_results.csv"])))
    assert [r["status"] for r in rows] == ["ok", "ok", "error"]
    agg = list(csv.DictReader(open(paths["aggregated.csv"])))
    assert len(agg) == 2 and all(r["runs"] == "1" for r in agg)


def test_report_schemas(sweep, tmp_path):
    queries = [0, 10, 20, 40]
    paths = emit_reports(sweep, tmp_path, queries)
    agg = list(csv.DictReader(open(paths["aggregated.csv"])))
    assert len(agg) == len(queries) * 3
    assert {(float(r["n_t"]), r["method"]) for r in agg} == {
        (float(q), m) for q in queries for m in ("naive", "sourcerer", "target-only")}
    assert set(agg[0]) == {"n_t", "method", "mean_accuracy", "mean_macro_f1", "clamped", "runs"}
    with open(paths["timing.csv"]) as fh:
        assert next(csv.reader(fh)) == ["method", "n_t", "mean_seconds"]
    for name in ("curves_log.svg", "curves_linear.svg"):
        svg = paths[name].read_text()
        assert svg.count("<polyline") == 3
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_aggregate_uses_instance_counts():
    rs = [RunResult("naive", 0, 0, 1, 10, accuracy=0.5, macro_f1=0.4),
          RunResult("naive", 0, 0, 2, 30, accuracy=0.7, macro_f1=0.6)]
    rows = aggregate(rs, [20])
    assert rows[0]["mean_accuracy"] == pytest.approx(0.6)
    assert rows[0]["mean_macro_f1"] == pytest.approx(0.5)


def test_emit_reports_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_reports([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports([RunResult("naive", 0, 0, 1, 1, accuracy=1.0)], blocker / "sub")
