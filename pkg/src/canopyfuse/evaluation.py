"""Accuracy assessment: error metrics with per-height-bin breakdowns,
empirical height distributions, random k-fold and geographic cross-validation
harnesses, sliding-window map prediction, and the tall-tree likelihood map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geo import RasterGrid, atomic_write_bytes, normalize, tile_patches

__all__ = [
    "MetricsReport",
    "binned_mae",
    "cumulative_height_distribution",
    "geographic_cv",
    "giant_tree_potential",
    "interval_accuracy",
    "kfold_indices",
    "kfold_random",
    "metrics",
    "metrics_from_rasters",
    "predict_map",
    "write_binned_mae_csv",
    "write_metrics_csv",
]

BIN_WIDTH_M = 10.0


# ------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    """Headline errors in meters plus a per-height-bin MAE breakdown.

    ``me`` is mean(predicted - reference): positive values mean the
    prediction runs high. ``binned_mae`` maps the low edge of each 10 m
    reference-height bin to ``(mae, count)``.
    """

    rmse: float
    mae: float
    me: float
    n: int
    binned_mae: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"metrics over {self.n} points")
        if self.mae > self.rmse + 1e-9:
            raise ValueError(f"mae {self.mae} exceeds rmse {self.rmse}")
        if abs(self.me) > self.mae + 1e-9:
            raise ValueError(f"|me| {abs(self.me)} exceeds mae {self.mae}")
        if self.binned_mae:
            total = sum(c for _, c in self.binned_mae.values())
            if total != self.n:
                raise ValueError(
                    f"bin counts sum to {total}, expected n={self.n}"
                )


def _as_pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("no values to score")
    if pred.size != ref.size:
        raise ValueError(
            f"length mismatch: {pred.size} predictions vs {ref.size} references"
        )
    return pred, ref


def binned_mae(pred, ref, bin_width: float = BIN_WIDTH_M) -> dict:
    """MAE per reference-height bin of the given width; empty bins omitted.
    Keys are bin low edges, values are ``(mae, count)``."""
    pred, ref = _as_pair(pred, ref)
    err = np.abs(pred - ref)
    lows = np.floor(ref / bin_width) * bin_width
    out = {}
    for low in np.unique(lows):
        sel = lows == low
        out[float(low)] = (float(err[sel].mean()), int(sel.sum()))
    return out


def metrics(pred, ref, bin_width: float = BIN_WIDTH_M) -> MetricsReport:
    """RMSE, MAE, and mean error of predictions against references."""
    pred, ref = _as_pair(pred, ref)
    d = pred - ref
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(d * d))),
        mae=float(np.mean(np.abs(d))),
        me=float(np.mean(d)),
        n=int(d.size),
        binned_mae=binned_mae(pred, ref, bin_width),
    )


def metrics_from_rasters(pred: RasterGrid, ref: RasterGrid,
                         bin_width: float = BIN_WIDTH_M) -> MetricsReport:
    """Score a predicted single-band raster against a reference raster over
    pixels valid in both."""
    if pred.bands != 1 or ref.bands != 1:
        raise ValueError(
            f"expected single-band rasters, got {pred.bands} and {ref.bands}"
        )
    if pred.data.shape != ref.data.shape:
        raise ValueError(
            f"raster shapes differ: {pred.data.shape} vs {ref.data.shape}"
        )
    ok = pred.valid_mask()[0] & ref.valid_mask()[0]
    if not ok.any():
        raise ValueError("no pixel is valid in both rasters")
    return metrics(pred.data[0][ok], ref.data[0][ok], bin_width)


# ----------------------------------------------------------------------- cdf


def cumulative_height_distribution(values) -> list:
    """Empirical CDF as sorted (height, cumulative fraction) pairs,
    right-continuous with one point per distinct height."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("no values for a distribution")
    heights, counts = np.unique(arr, return_counts=True)
    fracs = np.cumsum(counts) / arr.size
    return [(float(h), float(f)) for h, f in zip(heights, fracs)]


# ------------------------------------------------------- interval accuracy


def interval_accuracy(pred, ref, tolerance: float = 10.0,
                      bin_width: float = BIN_WIDTH_M) -> dict:
    """Fraction of predictions within ``tolerance`` meters of the reference,
    grouped by the bin of the *predicted* height (the lookup key available
    when only predictions exist)."""
    pred, ref = _as_pair(pred, ref)
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    hit = np.abs(pred - ref) <= tolerance
    lows = np.floor(pred / bin_width) * bin_width
    out = {}
    for low in np.unique(lows):
        sel = lows == low
        out[float(low)] = float(hit[sel].mean())
    return out


# --------------------------------------------------------------------- kfold


def kfold_indices(n: int, k: int, seed) -> list:
    """Shuffle 0..n-1 and split into k folds with sizes differing by <= 1."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return [fold.tolist() for fold in np.array_split(order, k)]


def kfold_random(samples, k: int = 10, seed=0, *, train_fn: Callable,
                 eval_fn: Callable) -> MetricsReport:
    """Random k-fold cross-validation. Each fold holds out its samples, a
    fresh model is trained on the rest, and per-fold metrics are averaged
    (macro). The per-bin breakdown pools all held-out predictions so sparse
    bins stay populated."""
    samples = list(samples)
    folds = kfold_indices(len(samples), k, seed)
    fold_reports = []
    all_pred, all_ref = [], []
    for fold in folds:
        held = set(fold)
        train = [s for i, s in enumerate(samples) if i not in held]
        test = [samples[i] for i in fold]
        model = train_fn(train)
        pred, ref = eval_fn(model, test)
        fold_reports.append(metrics(pred, ref))
        all_pred.append(np.asarray(pred, dtype=np.float64).ravel())
        all_ref.append(np.asarray(ref, dtype=np.float64).ravel())
    pooled_pred = np.concatenate(all_pred)
    pooled_ref = np.concatenate(all_ref)
    return MetricsReport(
        rmse=float(np.mean([r.rmse for r in fold_reports])),
        mae=float(np.mean([r.mae for r in fold_reports])),
        me=float(np.mean([r.me for r in fold_reports])),
        n=int(pooled_pred.size),
        binned_mae=binned_mae(pooled_pred, pooled_ref),
    )


# ------------------------------------------------------------- geographic cv


def _region_of(sample, regions):
    if regions is None:
        return sample.region
    return regions[sample.sample_id]


def _check_leakage(train, test):
    shared = {s.sample_id for s in train} & {s.sample_id for s in test}
    if shared:
        raise RuntimeError(
            f"train/test leakage: {len(shared)} sample ids appear in both"
        )


def geographic_cv(samples, regions: Mapping | None = None,
                  mode: str = "holdout", *, train_fn: Callable,
                  eval_fn: Callable, train_regions=None,
                  test_regions=None) -> dict:
    """Spatially stratified cross-validation keyed by region id.

    ``holdout``: each region in turn is held out and scored after training
    on all the others. ``transfer``: one model trained on ``train_regions``
    is scored on each region in the disjoint ``test_regions``. Train and
    test sample ids are verified disjoint in every run."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    by_region: dict = {}
    for s in samples:
        by_region.setdefault(_region_of(s, regions), []).append(s)
    if len(by_region) < 2:
        raise ValueError(
            f"geographic CV needs >= 2 regions, got {sorted(by_region)}"
        )
    reports = {}
    if mode == "holdout":
        for region in sorted(by_region):
            test = by_region[region]
            train = [s for r, group in sorted(by_region.items())
                     for s in group if r != region]
            _check_leakage(train, test)
            model = train_fn(train)
            pred, ref = eval_fn(model, test)
            reports[region] = metrics(pred, ref)
        return reports
    if mode == "transfer":
        if not train_regions or not test_regions:
            raise ValueError("transfer mode needs train_regions and test_regions")
        train_set = set(train_regions)
        test_set = set(test_regions)
        if train_set & test_set:
            raise ValueError(
                f"train and test regions overlap: {sorted(train_set & test_set)}"
            )
        for r in sorted(train_set | test_set):
            if r not in by_region:
                raise ValueError(f"region {r!r} has no samples")
        train = [s for r in sorted(train_set) for s in by_region[r]]
        model = train_fn(train)
        for region in sorted(test_set):
            test = by_region[region]
            _check_leakage(train, test)
            pred, ref = eval_fn(model, test)
            reports[region] = metrics(pred, ref)
        return reports
    raise ValueError(f"unknown mode {mode!r}; expected 'holdout' or 'transfer'")


# --------------------------------------------------------------- predict map

_FORWARD_CHUNK = 32


def predict_map(model, bands: RasterGrid, patch: int, step: int) -> RasterGrid:
    """Predict a single-band height map with overlapping sliding windows.

    Bands are normalized with the model's stored channel statistics when
    present; invalid pixels are fed as zeros and masked out of the result.
    Overlapping window predictions are averaged with equal weight. Output
    pixels where any input band is nodata carry the input's nodata value.
    """
    if bands.bands != model.in_channels:
        raise ValueError(
            f"model expects {model.in_channels} input channels, "
            f"raster has {bands.bands}"
        )
    grid = bands
    if getattr(model, "channel_stats", None) is not None:
        grid = normalize(bands, model.channel_stats)
    origins = tile_patches(grid, patch, step)
    cube = np.where(grid.valid_mask(), grid.data, np.float32(0.0))
    cube = cube.astype(model.dtype, copy=False)

    sums = np.zeros((grid.height, grid.width), dtype=np.float64)
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    for lo in range(0, len(origins), _FORWARD_CHUNK):
        chunk = origins[lo:lo + _FORWARD_CHUNK]
        xb = np.stack([cube[:, r0:r0 + patch, c0:c0 + patch] for c0, r0 in chunk])
        preds, _, _ = model.forward(xb)
        for (c0, r0), p in zip(chunk, preds):
            sums[r0:r0 + patch, c0:c0 + patch] += p
            counts[r0:r0 + patch, c0:c0 + patch] += 1

    avg = sums / np.maximum(counts, 1)
    ok = bands.all_bands_valid() & (counts > 0)
    out = np.where(ok, avg.astype(np.float32), np.float32(bands.nodata))
    return RasterGrid(out[None], bands.transform, bands.nodata)


# ------------------------------------------------------ giant tree potential


def giant_tree_potential(pred_map: RasterGrid, interval_accuracy: Mapping,
                         threshold: float = 80.0,
                         bin_width: float = BIN_WIDTH_M) -> RasterGrid:
    """Likelihood map for trees at or above the height threshold.

    Each valid pixel predicted at or above ``threshold`` gets the accuracy
    of its predicted-height bin; lower pixels get 0; nodata passes through.
    A prediction falling in a bin missing from the table is an error — no
    silent default."""
    if pred_map.bands != 1:
        raise ValueError(f"expected a single-band height map, got {pred_map.bands}")
    for low, acc in interval_accuracy.items():
        if not (0.0 <= float(acc) <= 1.0):
            raise ValueError(f"accuracy for bin {low} is {acc}, outside [0, 1]")
    heights = pred_map.data[0]
    valid = pred_map.valid_mask()[0]
    out = np.zeros_like(heights, dtype=np.float32)
    tall = valid & (heights >= threshold)
    lows = np.floor(heights[tall].astype(np.float64) / bin_width) * bin_width
    table = {float(k): np.float32(v) for k, v in interval_accuracy.items()}
    missing = sorted(set(float(v) for v in lows) - set(table))
    if missing:
        raise ValueError(
            f"no accuracy entry for predicted height bin(s) "
            f"{', '.join(str(int(m)) for m in missing)}"
        )
    if lows.size:
        out[tall] = np.array([table[float(v)] for v in lows], dtype=np.float32)
    out[~valid] = np.float32(pred_map.nodata)
    return RasterGrid(out[None], pred_map.transform, pred_map.nodata)


# ----------------------------------------------------------------- csv forms


def metrics_csv_text(report: MetricsReport) -> str:
    lines = [
        "metric,value",
        f"rmse,{repr(float(report.rmse))}",
        f"mae,{repr(float(report.mae))}",
        f"me,{repr(float(report.me))}",
        f"n,{int(report.n)}",
    ]
    return "\n".join(lines) + "\n"


def binned_mae_csv_text(report: MetricsReport) -> str:
    lines = ["bin_low_m,mae_m,n"]
    for low in sorted(report.binned_mae):
        mae, n = report.binned_mae[low]
        lines.append(f"{repr(float(low))},{repr(float(mae))},{int(n)}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(path: str, report: MetricsReport) -> None:
    atomic_write_bytes(path, metrics_csv_text(report).encode("utf-8"))


def write_binned_mae_csv(path: str, report: MetricsReport) -> None:
    atomic_write_bytes(path, binned_mae_csv_text(report).encode("utf-8"))
