"""Polygon-grouped multivariate time series: containers, percentile
normalization, polygon sampling, a synthetic two-domain generator and the
``meta.json`` + ``data.csv`` directory format."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import DTYPE, RngStream

log = logging.getLogger(__name__)

DATA_FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class NormStats:
    """Per-band 2nd and 98th percentiles of the source domain."""

    p2: np.ndarray
    p98: np.ndarray

    def __post_init__(self):
        self.p2 = np.asarray(self.p2, dtype=np.float64)
        self.p98 = np.asarray(self.p98, dtype=np.float64)
        if self.p2.shape != self.p98.shape:
            raise ValueError("NormStats: p2 and p98 must have the same length")
        if np.any(self.p98 <= self.p2):
            bad = np.flatnonzero(self.p98 <= self.p2).tolist()
            raise ValueError(f"NormStats: p98 must exceed p2 for every band (bad bands {bad})")


@dataclass
class Dataset:
    values: np.ndarray          # N x bands x timesteps, float32
    polygon_ids: np.ndarray     # N, int64
    class_ids: np.ndarray       # N, int64
    class_names: list[str]
    domain_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        self.polygon_ids = np.asarray(self.polygon_ids, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.values.ndim != 3:
            raise ValueError(f"Dataset values must be N x bands x timesteps, got {self.values.shape}")
        n = len(self.values)
        if self.polygon_ids.shape != (n,) or self.class_ids.shape != (n,):
            raise ValueError("Dataset: polygon_ids/class_ids must have one entry per instance")
        if n and (self.class_ids.min() < 0 or self.class_ids.max() >= len(self.class_names)):
            raise ValueError(f"Dataset: class ids must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "Dataset":
        return Dataset(self.values[index], self.polygon_ids[index], self.class_ids[index],
                       list(self.class_names), self.domain_tag)

    def polygons(self) -> np.ndarray:
        return np.unique(self.polygon_ids)

    def polygon_index(self) -> "PolygonIndex":
        return PolygonIndex.from_dataset(self)

    def equals(self, other: "Dataset") -> bool:
        return (self.class_names == other.class_names and self.domain_tag == other.domain_tag
                and self.values.shape == other.values.shape
                and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
                and np.array_equal(self.polygon_ids, other.polygon_ids)
                and np.array_equal(self.class_ids, other.class_ids))


@dataclass
class PolygonIndex:
    """polygon_id -> (class_id, instance offsets)."""

    entries: dict[int, tuple[int, np.ndarray]]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "PolygonIndex":
        order = np.argsort(ds.polygon_ids, kind="stable")
        ids, starts = np.unique(ds.polygon_ids[order], return_index=True)
        bounds = list(starts[1:]) + [len(order)]
        entries = {}
        for pid, lo, hi in zip(ids.tolist(), starts, bounds):
            offs = np.sort(order[lo:hi])
            classes = np.unique(ds.class_ids[offs])
            if len(classes) != 1:
                raise ValueError(f"polygon {pid} mixes classes {classes.tolist()}")
            entries[pid] = (int(classes[0]), offs)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def sizes(self) -> np.ndarray:
        return np.array([len(offs) for _, offs in self.entries.values()])


# ---------------------------------------------------------------------------
# normalization


def compute_norm_stats(source: Dataset) -> NormStats:
    """2nd/98th percentiles per band, pooled over instances and timesteps
    (linear interpolation between order statistics)."""
    if len(source) == 0:
        raise ValueError("compute_norm_stats: empty dataset")
    pooled = source.values.transpose(1, 0, 2).reshape(source.n_bands, -1).astype(np.float64)
    p2, p98 = np.percentile(pooled, [2.0, 98.0], axis=1, method="linear")
    flat = np.flatnonzero(p98 <= p2)
    if flat.size:
        raise ValueError(f"compute_norm_stats: band(s) {flat.tolist()} are constant between the 2nd and 98th percentile")
    return NormStats(p2, p98)


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    """x' = (x - p2) / (p98 - p2) per band, without clipping."""
    if len(stats.p2) != ds.n_bands:
        raise ValueError(f"normalize: stats for {len(stats.p2)} bands, dataset has {ds.n_bands}")
    lo = stats.p2.reshape(1, -1, 1)
    span = (stats.p98 - stats.p2).reshape(1, -1, 1)
    vals = (ds.values.astype(np.float64) - lo) / span
    return Dataset(vals.astype(DTYPE), ds.polygon_ids.copy(), ds.class_ids.copy(),
                   list(ds.class_names), ds.domain_tag)


# ---------------------------------------------------------------------------
# polygon sampling


def polygon_order(train: Dataset, rng: RngStream) -> np.ndarray:
    """A uniformly random ordering of the polygon ids.  Taking prefixes of one
    ordering gives nested samples without replacement."""
    return rng.gen.permutation(train.polygons())


def select_polygons(train: Dataset, polygon_ids) -> Dataset:
    mask = np.isin(train.polygon_ids, np.asarray(polygon_ids, dtype=np.int64))
    return train.subset(mask)


def sample_polygons(train: Dataset, n_polygons: int, rng: RngStream) -> Dataset:
    """All instances of ``n_polygons`` polygons drawn uniformly without replacement."""
    available = len(train.polygons())
    if n_polygons < 0 or n_polygons > available:
        raise ValueError(f"sample_polygons: asked for {n_polygons} polygons, {available} available")
    return select_polygons(train, polygon_order(train, rng)[:n_polygons])


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    n_bands: int = 4
    n_timesteps: int = 37
    source_polygons_per_class: int = 20
    target_train_polygons_per_class: int = 40
    target_test_polygons_per_class: int = 10
    polygon_size_mean: float = 300.0
    polygon_size_min: int = 7
    temporal_shift: float = 0.0               # timesteps, target relative to source
    band_scale: list[float] | None = None     # per-band target amplitude factor
    source_class_weights: list[float] | None = None
    target_class_weights: list[float] | None = None
    absent_in_source: list[int] = field(default_factory=list)
    sigma_poly: float = 0.05
    sigma_pix: float = 0.02
    sigma_phase: float = 0.0                  # per-polygon timing jitter, timesteps
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_bands < 1 or self.n_timesteps < 2:
            raise ValueError("SyntheticSpec: need at least 1 class, 1 band and 2 timesteps")
        if self.source_polygons_per_class < 1 or self.target_train_polygons_per_class < 1 \
                or self.target_test_polygons_per_class < 1:
            raise ValueError("SyntheticSpec: polygons per class must be positive")
        if abs(self.temporal_shift) >= self.n_timesteps:
            raise ValueError("SyntheticSpec: temporal shift must be smaller than the series length")
        if min(self.sigma_poly, self.sigma_pix, self.sigma_phase) < 0:
            raise ValueError("SyntheticSpec: noise scales must be non-negative")
        if self.polygon_size_min < 1 or self.polygon_size_mean < self.polygon_size_min:
            raise ValueError("SyntheticSpec: need 1 <= polygon_size_min <= polygon_size_mean")
        for name in ("band_scale",):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_bands:
                raise ValueError(f"SyntheticSpec.{name} needs one entry per band")
        for name in ("source_class_weights", "target_class_weights"):
            v = getattr(self, name)
            if v is not None and (len(v) != self.n_classes or min(v) < 0):
                raise ValueError(f"SyntheticSpec.{name} needs one non-negative weight per class")
        if any(not 0 <= c < self.n_classes for c in self.absent_in_source):
            raise ValueError("SyntheticSpec.absent_in_source lists an unknown class")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _ClassCurves:
    bump_amp: np.ndarray    # C x B x 2
    bump_mu: np.ndarray     # C x B x 2
    bump_sd: np.ndarray     # C x B x 2
    slope: np.ndarray       # C x B
    level: np.ndarray       # C x B

    def evaluate(self, c: int, t: np.ndarray) -> np.ndarray:
        """Curve of class c at (possibly fractional) times t; returns B x len(t)."""
        tt = t[None, None, :]
        bumps = self.bump_amp[c][:, :, None] * np.exp(
            -0.5 * ((tt - self.bump_mu[c][:, :, None]) / self.bump_sd[c][:, :, None]) ** 2)
        return bumps.sum(axis=1) + self.slope[c][:, None] * t[None, :] + self.level[c][:, None]


def _class_curves(spec: SyntheticSpec, rng: RngStream) -> _ClassCurves:
    g = rng.gen
    c, b, t = spec.n_classes, spec.n_bands, spec.n_timesteps
    return _ClassCurves(
        bump_amp=g.uniform(0.2, 1.0, (c, b, 2)),
        bump_mu=g.uniform(0.15 * t, 0.85 * t, (c, b, 2)),
        bump_sd=g.uniform(0.05 * t, 0.15 * t, (c, b, 2)),
        slope=g.uniform(-0.3, 0.3, (c, b)) / t,
        level=g.uniform(0.1, 0.5, (c, b)),
    )


def _draw_domain(spec: SyntheticSpec, curves: _ClassCurves, band_base: np.ndarray,
                 polygons_per_class: int, weights, shift: float, scale: np.ndarray,
                 rng: RngStream, first_pid: int, tag: str):
    g = rng.gen
    t = np.arange(spec.n_timesteps, dtype=np.float64)
    w = np.ones(spec.n_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    values, pids, cids = [], [], []
    pid = first_pid
    for c in range(spec.n_classes):
        n_poly = int(round(polygons_per_class * w[c]))
        for _ in range(n_poly):
            size = spec.polygon_size_min + int(g.poisson(spec.polygon_size_mean - spec.polygon_size_min))
            phase = g.normal(0.0, spec.sigma_phase) if spec.sigma_phase > 0 else 0.0
            base = curves.evaluate(c, t - shift - phase) * scale[:, None]
            base = base + g.normal(0.0, spec.sigma_poly, (spec.n_bands, 1))
            pix = base[None] + g.normal(0.0, spec.sigma_pix, (size, spec.n_bands, spec.n_timesteps))
            values.append(pix * band_base[None, :, None])
            pids.append(np.full(size, pid))
            cids.append(np.full(size, c))
            pid += 1
    names = [f"class_{c}" for c in range(spec.n_classes)]
    if not values:
        raise ValueError(f"synthetic domain {tag!r} has no polygons")
    ds = Dataset(np.concatenate(values), np.concatenate(pids), np.concatenate(cids), names, tag)
    return ds, pid


def generate_synthetic_pair(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Source domain plus a polygon-blocked train/test split of a shifted target.

    Each class has a smooth per-band curve (two Gaussian bumps and a linear
    trend).  The target domain sees those curves shifted in time and scaled per
    band; polygons add a shared per-band offset and pixels i.i.d. noise.
    """
    if spec.n_classes < 1:
        raise ValueError("generate_synthetic_pair: need at least one class")
    root = RngStream(spec.seed, "synthetic")
    curves = _class_curves(spec, root.child("curves"))
    band_base = root.child("bands").gen.uniform(500.0, 3000.0, spec.n_bands)
    ones = np.ones(spec.n_bands)
    tscale = ones if spec.band_scale is None else np.asarray(spec.band_scale, dtype=np.float64)

    src_w = np.ones(spec.n_classes) if spec.source_class_weights is None else np.array(spec.source_class_weights, float)
    src_w[list(spec.absent_in_source)] = 0.0
    source, _ = _draw_domain(spec, curves, band_base, spec.source_polygons_per_class, src_w, 0.0, ones,
                             root.child("source"), 0, "source")
    target_train, next_pid = _draw_domain(spec, curves, band_base, spec.target_train_polygons_per_class,
                                          spec.target_class_weights, spec.temporal_shift, tscale,
                                          root.child("target_train"), 0, "target_train")
    target_test, _ = _draw_domain(spec, curves, band_base, spec.target_test_polygons_per_class,
                                  spec.target_class_weights, spec.temporal_shift, tscale,
                                  root.child("target_test"), next_pid, "target_test")
    if spec.sigma_pix >= spec.sigma_poly > 0:
        log.warning("sigma_pix >= sigma_poly: pixels within a polygon vary as much as polygons do")
    return source, target_train, target_test


def polygon_dispersion(ds: Dataset, c: int) -> tuple[float, float]:
    """(mean within-polygon variance, variance of polygon means) for class c,
    averaged over bands and timesteps."""
    idx = ds.polygon_index()
    within, means = [], []
    for cls, offs in idx.entries.values():
        if cls != c:
            continue
        v = ds.values[offs].astype(np.float64)
        within.append(v.var(axis=0).mean() if len(v) > 1 else 0.0)
        means.append(v.mean(axis=0))
    if len(means) < 2:
        raise ValueError(f"class {c} needs at least two polygons")
    return float(np.mean(within)), float(np.stack(means).var(axis=0).mean())


# ---------------------------------------------------------------------------
# directory format


def _value_columns(n_bands: int, n_timesteps: int) -> list[str]:
    return [f"v_b{b}_t{t}" for b in range(n_bands) for t in range(n_timesteps)]


def write_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": DATA_FORMAT_VERSION, "n_bands": ds.n_bands, "n_timesteps": ds.n_timesteps,
            "classes": list(ds.class_names), "domain_tag": ds.domain_tag}
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    header = ",".join(["polygon_id", "class_id"] + _value_columns(ds.n_bands, ds.n_timesteps))
    flat = ds.values.reshape(len(ds), -1)
    with open(d / "data.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        # 9 significant digits round-trip every float32 exactly
        fmt = "%d,%d," + ",".join(["%.9g"] * flat.shape[1]) + "\n"
        for pid, cid, row in zip(ds.polygon_ids.tolist(), ds.class_ids.tolist(), flat.astype(np.float64)):
            fh.write(fmt % (pid, cid, *row))


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"{d}: missing meta.json") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{d}/meta.json: invalid JSON ({e})") from None
    if meta.get("format_version") != DATA_FORMAT_VERSION:
        raise DatasetFormatError(f"{d}/meta.json: unsupported format_version {meta.get('format_version')!r}")
    n_b, n_t, classes = int(meta["n_bands"]), int(meta["n_timesteps"]), list(meta["classes"])
    path = d / "data.csv"
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    expected = ["polygon_id", "class_id"] + _value_columns(n_b, n_t)
    if header != expected:
        raise DatasetFormatError(f"{path}: header does not match meta.json "
                                 f"({len(header)} columns, expected {len(expected)})")
    ncol = len(expected)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise DatasetFormatError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
        rows.append(parts)
    if rows:
        try:
            ids = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64)
            vals = np.array([r[2:] for r in rows], dtype=np.float64)
        except ValueError as e:
            raise DatasetFormatError(f"{path}: unparsable value ({e})") from None
    else:
        ids = np.zeros((0, 2), np.int64)
        vals = np.zeros((0, n_b * n_t))
    if len(ids) and (ids[:, 1].min() < 0 or ids[:, 1].max() >= len(classes)):
        bad = int(np.flatnonzero((ids[:, 1] < 0) | (ids[:, 1] >= len(classes)))[0]) + 2
        raise DatasetFormatError(f"{path}:{bad}: class id outside the {len(classes)} classes in meta.json")
    values = vals.astype(DTYPE).reshape(len(rows), n_b, n_t)
    return Dataset(values, ids[:, 0], ids[:, 1], classes, meta.get("domain_tag", ""))
