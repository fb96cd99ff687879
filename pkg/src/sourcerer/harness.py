"""Experiment orchestration: metrics, per-run curve interpolation and
averaging, the method x quantity x repeat sweep, and CSV/SVG reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (Dataset, SyntheticSpec, compute_norm_stats, generate_synthetic_pair, normalize,
                   polygon_order, read_dataset, select_polygons)
from .methods import METHODS, MethodConfig, run_method, train_supervised
from .nn import RngStream
from .regularize import LambdaSchedule, TrainBudget
from .tempcnn import TempCNNModel, predict

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000, 2000)
DEFAULT_QUERIES = (0, 20, 50, 100, 250, 500, 1000, 5000, 10000, 25000, 50000, 100000)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    confusion: np.ndarray       # truth x prediction counts
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    present: list[int]          # classes in truth or predictions

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "accuracy": self.accuracy,
                "precision": self.precision.tolist(), "recall": self.recall.tolist(),
                "f1": self.f1.tolist(), "macro_f1": self.macro_f1, "present": self.present}


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 -> 0
    out = np.zeros(len(num), np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def metric_report(truth, pred, n_classes: int) -> MetricReport:
    truth = np.asarray(truth, np.int64)
    pred = np.asarray(pred, np.int64)
    if truth.shape != pred.shape:
        raise ValueError("metric_report: truth and predictions differ in length")
    if len(truth) == 0:
        raise ValueError("metric_report: empty test set")
    for name, arr in (("truth", truth), ("predictions", pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"metric_report: {name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), np.int64)
    np.add.at(cm, (truth, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    precision = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    present = np.flatnonzero((cm.sum(axis=0) + cm.sum(axis=1)) > 0)
    return MetricReport(cm, float(np.trace(cm) / cm.sum()), precision, recall, f1,
                        float(f1[present].mean()), present.tolist())


def evaluate(model: TempCNNModel, test: Dataset) -> MetricReport:
    """Eval-mode predictions on ``test`` scored against its labels."""
    if len(test) == 0:
        raise ValueError("evaluate: empty test set")
    cfg = model.config
    if (test.n_bands, test.n_timesteps) != (cfg.n_bands, cfg.n_timesteps) or test.n_classes > cfg.n_classes:
        raise ValueError(f"evaluate: test data ({test.n_bands} bands, {test.n_timesteps} steps, "
                         f"{test.n_classes} classes) does not fit the model")
    return metric_report(test.class_ids, predict(model, test.values), cfg.n_classes)


# ---------------------------------------------------------------------------
# interpolation


@dataclass
class Interpolated:
    values: np.ndarray      # mean over runs, one per query
    clamped: np.ndarray     # True where any run had to clamp
    per_run: np.ndarray     # runs x queries


def interpolate_run(points, queries) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear interpolation of one run's (n_t, value) points.

    Queries outside the observed range take the nearest endpoint value and
    are flagged.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ValueError("interpolate_run: need at least two points per run")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.any(np.diff(xs) <= 0):
        raise ValueError("interpolate_run: points must be sorted by strictly increasing n_t")
    q = np.asarray(queries, np.float64)
    out = np.empty(len(q))
    clamped = (q < xs[0]) | (q > xs[-1])
    for i, x in enumerate(q):
        if x <= xs[0]:
            out[i] = ys[0]
        elif x >= xs[-1]:
            out[i] = ys[-1]
        else:
            j = int(np.searchsorted(xs, x, side="right")) - 1
            if x == xs[j]:
                out[i] = ys[j]
            else:
                w = (x - xs[j]) / (xs[j + 1] - xs[j])
                out[i] = (1.0 - w) * ys[j] + w * ys[j + 1]
    return out, clamped


def interpolate_accuracy(runs, queries) -> Interpolated:
    """Interpolate each run at ``queries`` and average across runs."""
    if not runs:
        raise ValueError("interpolate_accuracy: no runs")
    vals, flags = zip(*(interpolate_run(r, queries) for r in runs))
    per_run = np.stack(vals)
    return Interpolated(per_run.mean(axis=0), np.any(np.stack(flags), axis=0), per_run)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class ExperimentConfig:
    methods: list[str] = field(default_factory=lambda: ["source-only", "target-only", "naive", "sourcerer"])
    spec: dict | None = None            # SyntheticSpec fields; used when no dataset paths are given
    source: str | None = None           # dataset directories
    target_train: str | None = None
    target_test: str | None = None
    schedule: list[int] = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    include_zero: bool = True           # extra quantity-0 row per method and repeat
    repeats: int = 5
    seeds: list[int] | None = None      # one per repeat; default 0..repeats-1
    queries: list[float] = field(default_factory=lambda: list(DEFAULT_QUERIES))
    t_max: float = 1e6
    grad_updates: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    model: dict = field(default_factory=dict)
    dann_alpha: float = 1.0
    mme_lambda: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("ExperimentConfig: no methods")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"ExperimentConfig: unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("ExperimentConfig: duplicate methods")
        if not self.schedule or any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("ExperimentConfig: schedule must be non-empty and strictly increasing")
        if self.schedule[0] < 1:
            raise ValueError("ExperimentConfig: schedule entries are polygon counts >= 1")
        if self.repeats < 1:
            raise ValueError("ExperimentConfig: repeats must be >= 1")
        if self.seeds is None:
            self.seeds = list(range(self.repeats))
        if len(self.seeds) != self.repeats:
            raise ValueError("ExperimentConfig: need one seed per repeat")
        paths = [self.source, self.target_train, self.target_test]
        if any(p is not None for p in paths) and not all(p is not None for p in paths):
            raise ValueError("ExperimentConfig: give all three dataset paths or none")
        if self.spec is None and self.source is None:
            raise ValueError("ExperimentConfig: need a synthetic spec or dataset paths")
        if self.workers < 1:
            raise ValueError("ExperimentConfig: workers must be >= 1")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ExperimentConfig: unknown keys {sorted(unknown)}")
        return cls(**doc)

    def method_config(self, method: str, seed: int) -> MethodConfig:
        extra = {}
        if method == "sourcerer":
            extra["schedule"] = LambdaSchedule(t_max=self.t_max)
        elif method == "dann":
            extra["dann_alpha"] = self.dann_alpha
        elif method == "mme":
            extra["mme_lambda"] = self.mme_lambda
        return MethodConfig(method, budget=TrainBudget(self.grad_updates, self.batch_size), seed=seed,
                            lr=self.lr, model=dict(self.model), **extra)


@dataclass
class RunResult:
    method: str
    seed: int
    repeat: int
    polygons: int
    n_t: int
    accuracy: float = math.nan
    macro_f1: float = math.nan
    f1: list[float] = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


RAW_COLUMNS = ["repeat", "seed", "method", "polygons", "n_t", "status", "accuracy", "macro_f1", "f1", "error"]


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Normalized (source, target_train, target_test); statistics come from the source."""
    if config.source is not None:
        src, tt, te = (read_dataset(p) for p in (config.source, config.target_train, config.target_test))
    else:
        src, tt, te = generate_synthetic_pair(SyntheticSpec.from_dict(config.spec))
    stats = compute_norm_stats(src)
    return normalize(src, stats), normalize(tt, stats), normalize(te, stats)


def _job(args) -> RunResult:
    method, mcfg, source_model, source, labelled, unlabelled, test, base = args
    res = RunResult(method, **base)
    try:
        t0 = time.perf_counter()
        model, _ = run_method(method, source_model, source, labelled, unlabelled, mcfg)
        res.seconds = time.perf_counter() - t0
        rep = evaluate(model, test)
        res.accuracy, res.macro_f1, res.f1 = rep.accuracy, rep.macro_f1, rep.f1.tolist()
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        res.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        log.warning("run %s seed=%d polygons=%d failed: %s", method, base["seed"], base["polygons"], res.error)
    return res


def plan_jobs(config: ExperimentConfig, data=None):
    """Yield job tuples for the whole sweep.  Source models are trained here,
    once per repeat, and shared by every method of that repeat."""
    source, target_train, target_test = data if data is not None else load_data(config)
    quantities = ([0] if config.include_zero else []) + list(config.schedule)
    for r, seed in enumerate(config.seeds):
        order = polygon_order(target_train, RngStream(seed, "polygons"))
        src_model = src_seconds = src_error = None
        if any(m != "target-only" for m in config.methods):
            try:
                t0 = time.perf_counter()
                src_model, _ = train_supervised(source, config.method_config("source-only", seed))
                src_seconds = time.perf_counter() - t0
            except Exception as exc:
                src_error = f"source training failed: {type(exc).__name__}: {exc}"
                log.warning(src_error)
        for q in quantities:
            base = {"seed": seed, "repeat": r, "polygons": q, "n_t": 0}
            if q > len(order):
                for m in config.methods:
                    yield ("error", RunResult(m, **base, error=f"ValueError: asked for {q} polygons, "
                                                               f"{len(order)} available"))
                continue
            labelled = select_polygons(target_train, order[:q])
            unlabelled = select_polygons(target_train, order[q:])
            base["n_t"] = len(labelled)
            for m in config.methods:
                if m == "source-only":
                    if src_model is None:
                        yield ("error", RunResult(m, **base, error=src_error))
                    else:
                        yield ("source", RunResult(m, **base, seconds=src_seconds), src_model, target_test)
                    continue
                if src_model is None and m in ("naive", "finetune", "sourcerer"):
                    yield ("error", RunResult(m, **base, error=src_error))
                    continue
                yield ("job", (m, config.method_config(m, seed), src_model, source, labelled, unlabelled,
                               target_test, base))


def run_experiment(config: ExperimentConfig, data=None) -> list[RunResult]:
    """Run the full sweep and return one RunResult per (repeat, quantity, method)."""
    results: list[RunResult] = []
    source_reports: dict[int, MetricReport] = {}
    pending = []

    def collect(item):
        kind = item[0]
        if kind == "error":
            results.append(item[1])
        elif kind == "source":
            res, model, test = item[1:]
            if res.repeat not in source_reports:
                source_reports[res.repeat] = evaluate(model, test)
            rep = source_reports[res.repeat]
            res.accuracy, res.macro_f1, res.f1 = rep.accuracy, rep.macro_f1, rep.f1.tolist()
            results.append(res)
        elif config.workers == 1:
            results.append(_job(item[1]))
        else:
            results.append(None)
            pending.append((len(results) - 1, item[1]))

    for item in plan_jobs(config, data):
        collect(item)
    if pending:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for (slot, _), res in zip(pending, pool.map(_job, [a for _, a in pending])):
                results[slot] = res
    return results


# ---------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_raw_csv(results: list[RunResult], path) -> None:
    """Per-run rows.  Wall-clock time is left out so that reruns are
    byte-identical; it goes to timing.csv instead."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for r in results:
            w.writerow([r.repeat, r.seed, r.method, r.polygons, r.n_t, "ok" if r.ok else "error",
                        _fmt(r.accuracy), _fmt(r.macro_f1), ";".join(_fmt(v) for v in r.f1), r.error or ""])


def aggregate(results: list[RunResult], queries) -> list[dict]:
    """One row per (query n_t, method): accuracy and macro F1 interpolated
    within every run, then averaged over runs."""
    rows = []
    methods = list(dict.fromkeys(r.method for r in results))
    n_err = sum(not r.ok for r in results)
    if n_err:
        log.warning("%d failed runs excluded from aggregation", n_err)
    for m in methods:
        runs: dict[int, list[RunResult]] = {}
        for r in results:
            if r.method == m and r.ok:
                runs.setdefault(r.repeat, []).append(r)
        acc_runs, f1_runs = [], []
        for rep in sorted(runs):
            pts = sorted(runs[rep], key=lambda r: (r.n_t, r.polygons))
            # several polygon counts can share an instance count only when
            # polygons are empty; keep the first
            dedup = {}
            for r in pts:
                dedup.setdefault(r.n_t, r)
            pts = list(dedup.values())
            if len(pts) < 2:
                log.warning("method %s repeat %d has fewer than two points; skipped", m, rep)
                continue
            acc_runs.append([(r.n_t, r.accuracy) for r in pts])
            f1_runs.append([(r.n_t, r.macro_f1) for r in pts])
        if not acc_runs:
            continue
        acc = interpolate_accuracy(acc_runs, queries)
        f1 = interpolate_accuracy(f1_runs, queries)
        for i, q in enumerate(queries):
            rows.append({"n_t": q, "method": m, "mean_accuracy": float(acc.values[i]),
                         "mean_macro_f1": float(f1.values[i]), "clamped": bool(acc.clamped[i]),
                         "runs": len(acc_runs)})
    return rows


def timing_rows(results: list[RunResult]) -> list[dict]:
    """Mean wall-clock seconds per (method, polygon count), keyed by the mean
    realized n_t."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        if r.ok:
            groups.setdefault((r.method, r.polygons), []).append(r)
    return [{"method": m, "n_t": float(np.mean([r.n_t for r in rs])),
             "mean_seconds": float(np.mean([r.seconds for r in rs]))}
            for (m, p), rs in groups.items()]


def _write_rows(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


def curves_svg(rows: list[dict], log_x: bool) -> str:
    """Mean accuracy vs. quantity, one polyline per method."""
    width, height, pad = 640, 420, 50
    methods = list(dict.fromkeys(r["method"] for r in rows))
    xs = sorted({r["n_t"] for r in rows})
    tx = (lambda v: math.log10(max(v, 1.0))) if log_x else float
    lo, hi = tx(xs[0]), tx(xs[-1])
    span = hi - lo or 1.0

    def px(v):
        return pad + (tx(v) - lo) / span * (width - 2 * pad)

    def py(a):
        return height - pad - a * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">'
           f'labelled target instances{" (log scale)" if log_x else ""}</text>',
           f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
           f'text-anchor="middle">overall accuracy</text>']
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{pad - 6}" y="{py(a) + 4:.1f}" text-anchor="end" font-size="10">{a:.2f}</text>')
    for i, m in enumerate(methods):
        pts = sorted((r["n_t"], r["mean_accuracy"]) for r in rows if r["method"] == m)
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        color = _COLORS[i % len(_COLORS)]
        out.append(f'<polyline class="method" data-method="{m}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="11" fill="{color}">{m}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_reports(results: list[RunResult], out_dir, queries=DEFAULT_QUERIES) -> dict[str, Path]:
    """Write raw_results.csv, aggregated.csv, timing.csv and the two SVG plots."""
    if not results:
        raise ValueError("emit_reports: no results")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("raw_results.csv", "aggregated.csv", "timing.csv",
                                           "curves_log.svg", "curves_linear.svg")}
    write_raw_csv(results, paths["raw_results.csv"])
    agg = aggregate(results, list(queries))
    _write_rows(agg, ["n_t", "method", "mean_accuracy", "mean_macro_f1", "clamped", "runs"],
                paths["aggregated.csv"])
    _write_rows(timing_rows(results), ["method", "n_t", "mean_seconds"], paths["timing.csv"])
    if agg:
        paths["curves_log.svg"].write_text(curves_svg(agg, log_x=True), encoding="utf-8")
        paths["curves_linear.svg"].write_text(curves_svg(agg, log_x=False), encoding="utf-8")
    else:
        del paths["curves_log.svg"], paths["curves_linear.svg"]
    return paths


def config_to_json(config: ExperimentConfig) -> str:
    return json.dumps(asdict(config), indent=1, sort_keys=True) + "\n"
