"""Command-line pipeline for canopy-height mapping.

Subcommands cover the full workflow: synthesize a scene, denoise photon
tracks, summarize canopy steps and waveforms, fuse footprints onto a grid,
train, predict, evaluate, cross-validate, and map giant-tree potential.

Conventions shared by every subcommand:

* ``--out DIR`` chooses the output directory, ``--config PATH`` reads a flat
  ``key = value`` file, and explicit flags override the file, which overrides
  built-in defaults.
* All outputs for a run are computed first and written only on success, so a
  failed run leaves no partial files. Each successful run also writes
  ``manifest.json`` recording the resolved config plus SHA-256 digests of
  inputs and outputs.
* Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown
  subcommand), 3 validation failure (bad flag/config value or inconsistent
  inputs detected before compute).
* ``CANOPYFUSE_LOG`` (error, warn, info, debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import __version__, evaluation, fusion, geo, lidar, report, synth
from . import train as training
from .net import ModelConfig, PyramidRegressor, model_from_bytes, model_to_bytes

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3

log = logging.getLogger("canopyfuse")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class ValidationFailure(ValueError):
    """Bad flag/config value or inconsistent inputs; maps to exit code 3."""


# ------------------------------------------------------------- option casts


def _int(text: str) -> int:
    return int(text, 10)


def _float(text: str) -> float:
    value = float(text)
    if not np.isfinite(value):
        raise ValueError("must be finite")
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _str(text: str) -> str:
    return text


def _int_tuple(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p, 10) for p in parts)


def _str_tuple(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list")
    return tuple(parts)


def _dims(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"expected ROWSxCOLS, got {text!r}")
    return (int(parts[0], 10), int(parts[1], 10))


def _choice(*allowed: str) -> Callable:
    def cast(text: str) -> str:
        if text not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {text!r}")
        return text

    return cast


@dataclass(frozen=True)
class Option:
    """One resolvable setting: flag ``--name`` (dashes) or config key (underscores)."""

    name: str
    cast: Callable
    default: object = None
    required: bool = False
    multi: bool = False      # flag takes one-or-more values; config uses commas
    help: str = ""


def _parse_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise ValidationFailure(f"config file not found: {path}")
    cfg: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or not key:
                raise ValidationFailure(
                    f"{path} line {lineno}: expected 'key = value'"
                )
            if key in cfg:
                raise ValidationFailure(f"{path} line {lineno}: duplicate key {key!r}")
            cfg[key] = value
    return cfg


def _resolve_options(args: argparse.Namespace, file_cfg: dict,
                     options: list, command: str) -> dict:
    known = {o.name for o in options}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise ValidationFailure(
            f"unknown config key(s) for {command}: {', '.join(unknown)}"
        )
    resolved = {}
    for o in options:
        raw = getattr(args, o.name)
        if raw is None and o.name in file_cfg:
            raw = file_cfg[o.name]
        if raw is None:
            if o.required:
                raise ValidationFailure(
                    f"{command}: --{o.name.replace('_', '-')} is required"
                )
            resolved[o.name] = o.default
            continue
        try:
            if o.multi:
                items = []
                for entry in raw if isinstance(raw, list) else [raw]:
                    items.extend(
                        p.strip() for p in str(entry).split(",") if p.strip()
                    )
                if not items:
                    raise ValueError("expected at least one value")
                resolved[o.name] = tuple(o.cast(item) for item in items)
            else:
                resolved[o.name] = o.cast(str(raw))
        except ValueError as exc:
            raise ValidationFailure(
                f"invalid value for {o.name.replace('_', '-')}: {exc}"
            ) from exc
    return resolved


# ----------------------------------------------------------- shared helpers


def _require_file(path, what: str) -> str:
    if not os.path.isfile(str(path)):
        raise ValidationFailure(f"{what} file not found: {path}")
    return str(path)


def _check_patch_step(patch: int, step: int, raster: geo.RasterGrid) -> None:
    if patch < 1 or step < 1:
        raise ValidationFailure("patch and step must be >= 1")
    if step > patch:
        raise ValidationFailure(f"step {step} must not exceed patch {patch}")
    if patch > min(raster.width, raster.height):
        raise ValidationFailure(
            f"patch {patch} exceeds the raster extent "
            f"{raster.width}x{raster.height}"
        )


def _select_bands(raster: geo.RasterGrid, subset) -> geo.RasterGrid:
    if subset is None:
        return raster
    bad = [i for i in subset if not 0 <= i < raster.bands]
    if bad:
        raise ValidationFailure(
            f"band indices {bad} out of range for a {raster.bands}-band raster"
        )
    return geo.RasterGrid(
        raster.data[list(subset)].copy(), raster.transform, raster.nodata
    )


def _csv_bytes(header: list, rows: list) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _labels_from_raster(fused: geo.RasterGrid) -> fusion.SparseLabelGrid:
    if fused.bands != 2:
        raise ValidationFailure(
            f"fused label raster must have 2 bands (mean height, count), "
            f"got {fused.bands}"
        )
    counts_plane = fused.data[1]
    counts = np.round(counts_plane).astype(np.int64)
    if not np.array_equal(counts_plane, counts) or (counts < 0).any():
        raise ValidationFailure("label counts band must hold non-negative integers")
    labels = geo.RasterGrid(fused.data[:1].copy(), fused.transform, fused.nodata)
    try:
        return fusion.SparseLabelGrid(labels=labels, counts=counts)
    except ValueError as exc:
        raise ValidationFailure(f"fused label raster is inconsistent: {exc}") from exc


def _model_config_from(o: dict) -> ModelConfig:
    try:
        return ModelConfig(
            entry_widths=o["entry_widths"],
            num_blocks=o["blocks"],
            branches=o["branches"],
            pool_branch=o["pool_branch"],
            branch_channels=o["branch_channels"],
            residual=o["residual"],
            seed=o["seed"],
        )
    except ValueError as exc:
        raise ValidationFailure(f"bad model settings: {exc}") from exc


def _train_config_from(o: dict) -> training.TrainConfig:
    try:
        return training.TrainConfig(
            batch_size=o["batch_size"],
            lr=o["lr"],
            milestones=o["milestones"],
            lr_gamma=o["lr_gamma"],
            epochs=o["epochs"],
            iters_per_epoch=o["iters_per_epoch"],
            grad_clip=o["grad_clip"],
            l2_lambda=o["l2_lambda"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            epsilon=o["epsilon"],
            val_fraction=o["val_fraction"],
            seed=o["seed"],
        )
    except ValueError as exc:
        raise ValidationFailure(f"bad training settings: {exc}") from exc


def _load_training_inputs(o: dict):
    """Read bands + fused labels (+ optional region map), normalize, and tile."""
    bands_path = _require_file(o["bands"], "bands")
    labels_path = _require_file(o["labels"], "labels")
    bands = geo.read_raster(bands_path)
    fused = geo.read_raster(labels_path)
    inputs = [bands_path, labels_path]

    selected = _select_bands(bands, o["band_subset"])
    _check_patch_step(o["patch"], o["step"], selected)
    label_grid = _labels_from_raster(fused)

    region_map = None
    if o.get("region_map") is not None:
        region_path = _require_file(o["region_map"], "region-map")
        inputs.append(region_path)
        region_map = geo.read_raster(region_path)

    try:
        stats = geo.compute_channel_stats(selected)
        normalized = geo.normalize(selected, stats)
        samples = fusion.build_samples(
            normalized, label_grid, o["patch"], o["step"], region_map
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    if not samples:
        raise ValidationFailure("no patch contains a labeled pixel")
    log.info("built %d training samples", len(samples))
    return samples, stats, inputs


def _masked_eval_fn(model, test_samples):
    preds, refs = [], []
    for s in test_samples:
        pred, _, _ = model.forward(s.patch)
        preds.append(np.asarray(pred)[s.label_mask])
        refs.append(s.label_values[s.label_mask])
    return np.concatenate(preds), np.concatenate(refs)


def _accuracy_table_csv(table: dict) -> bytes:
    rows = [[repr(float(low)), repr(float(acc))] for low, acc in sorted(table.items())]
    return _csv_bytes(["bin_low_m", "accuracy"], rows)


def _read_accuracy_csv(path: str) -> dict:
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header][:2] != ["bin_low_m", "accuracy"]:
            raise ValidationFailure(
                f"{path}: expected header bin_low_m,accuracy, got {header!r}"
            )
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                low, acc = float(row[0]), float(row[1])
            except (ValueError, IndexError) as exc:
                raise ValidationFailure(f"{path} row {i}: {exc}") from exc
            if not 0.0 <= acc <= 1.0:
                raise ValidationFailure(
                    f"{path} row {i}: accuracy {acc} outside [0, 1]"
                )
            table[low] = acc
    if not table:
        raise ValidationFailure(f"{path}: no accuracy rows")
    return table


# -------------------------------------------------------------- subcommands


def _horizontal_track(scene, row_frac: float):
    t = scene.true_chm.transform
    y = t.f + t.e * (scene.true_chm.height * row_frac)
    x0 = t.c - 5.0
    x1 = t.c + t.a * scene.true_chm.width + 5.0
    return ((x0, y), (x1, y))


def run_synth(o: dict):
    if not 0.0 < o["track_row_frac"] < 1.0:
        raise ValidationFailure(
            f"track-row-frac must be in (0, 1), got {o['track_row_frac']}"
        )
    try:
        scene = synth.gen_scene(
            o["seed"], o["width"], o["height"], bands=o["bands"],
            height_field=o["height_field"], band_model=o["band_model"],
            band_noise_sigma=o["band_noise_sigma"], regions=o["regions"],
        )
        gedi = synth.sample_footprints(
            scene, "gedi_like", n=o["gedi_n"],
            height_noise_sigma=o["footprint_noise_sigma"], dropout=o["dropout"],
            seed=o["seed"], bad_quality_fraction=o["bad_quality_fraction"],
        )
        icesat = synth.sample_footprints(
            scene, "icesat_like", n=o["icesat_n"],
            height_noise_sigma=o["footprint_noise_sigma"], dropout=o["dropout"],
            seed=o["seed"] + 1, bad_quality_fraction=o["bad_quality_fraction"],
        )
        photons = synth.gen_photons(
            scene, _horizontal_track(scene, o["track_row_frac"]),
            o["photons_per_meter"], o["noise_rate"], seed=o["seed"],
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    log.info("scene %dx%d, %d GEDI + %d ICESat-2 footprints, %d photons",
             o["width"], o["height"], len(gedi), len(icesat), len(photons))
    outputs = {
        "bands.chmr": geo.raster_to_bytes(scene.bands),
        "true_chm.chmr": geo.raster_to_bytes(scene.true_chm),
        "region_map.chmr": geo.raster_to_bytes(scene.region_map),
        "footprints_gedi.csv": lidar.footprints_csv_text(gedi).encode("utf-8"),
        "footprints_icesat.csv": lidar.footprints_csv_text(icesat).encode("utf-8"),
        "photons.csv": lidar.photons_csv_text(photons).encode("utf-8"),
    }
    return outputs, []


def run_denoise(o: dict):
    path = _require_file(o["photons"], "photons")
    photons = lidar.read_photons_csv(path)
    if not photons:
        raise ValidationFailure(f"{path}: no photons")
    labels = lidar.dbscan_label(photons, o["eps"], o["min_pts"])
    signal = [p for p, lab in zip(photons, labels) if lab == "signal"]
    log.info("%d/%d photons labeled signal", len(signal), len(photons))
    rows = [
        [repr(float(p.along_track)), repr(float(p.elevation)), lab]
        for p, lab in zip(photons, labels)
    ]
    outputs = {
        "photon_labels.csv": _csv_bytes(["along_m", "elev_m", "label"], rows),
        "photons_signal.csv": lidar.photons_csv_text(signal).encode("utf-8"),
        "photons.png": report.fig_photons(photons, labels),
    }
    return outputs, [path]


def run_steps(o: dict):
    path = _require_file(o["photons"], "photons")
    photons = lidar.read_photons_csv(path)
    if not photons:
        raise ValidationFailure(f"{path}: no photons")
    labels = lidar.dbscan_label(photons, o["eps"], o["min_pts"])
    signal = [p for p, lab in zip(photons, labels) if lab == "signal"]
    steps = lidar.classify_canopy_steps(signal, o["step_m"])
    log.info("%d canopy steps from %d signal photons", len(steps), len(signal))
    rows = [
        [repr(float(s.center)), repr(float(s.canopy_top)),
         repr(float(s.ground)), repr(float(s.height))]
        for s in steps
    ]
    outputs = {
        "canopy_steps.csv": _csv_bytes(
            ["center_m", "canopy_top_m", "ground_m", "height_m"], rows
        ),
        "steps.png": report.fig_steps(signal, steps),
    }
    return outputs, [path]


def run_waveform_rh(o: dict):
    path = _require_file(o["photons"], "photons")
    photons = lidar.read_photons_csv(path)
    if not photons:
        raise ValidationFailure(f"{path}: no photons")
    labels = lidar.dbscan_label(photons, o["eps"], o["min_pts"])
    # Noise spreads below ground level; the waveform is binned upward from
    # elevation 0, so only above-ground signal photons contribute.
    signal = [
        p for p, lab in zip(photons, labels)
        if lab == "signal" and p.elevation >= 0.0
    ]
    if not signal:
        raise ValidationFailure("no signal photons above ground level")
    points = np.array(
        [(p.along_track, 0.0, p.elevation) for p in signal], dtype=np.float64
    )
    try:
        waveform = lidar.simulate_waveform(
            points, (o["center_along"], 0.0), diameter=o["diameter"],
            sigma_bins=o["sigma_bins"], bin_size=o["bin_size"],
        )
    except lidar.EmptyFootprintError as exc:
        raise ValidationFailure(str(exc)) from exc
    rh = lidar.extract_rh(waveform)
    wave_rows = [
        [i, repr(float(waveform.elev0 + i * waveform.bin_size)), repr(float(e))]
        for i, e in enumerate(waveform.bin_energy)
    ]
    rh_rows = [
        [pct, repr(float(h))] for pct, h in sorted(rh.heights.items())
    ]
    outputs = {
        "waveform.csv": _csv_bytes(["bin_index", "elev_low_m", "energy"], wave_rows),
        "rh.csv": _csv_bytes(["percentile", "height_m"], rh_rows),
        "waveform.png": report.fig_waveform(waveform, rh),
    }
    return outputs, [path]


def run_fuse(o: dict):
    bands_path = _require_file(o["bands"], "bands")
    template = geo.read_raster(bands_path)
    inputs = [bands_path]
    records = []
    for fp_path in o["footprints"]:
        fp_path = _require_file(fp_path, "footprints")
        inputs.append(fp_path)
        records.extend(lidar.read_footprints_csv(fp_path))
    if not records:
        raise ValidationFailure("no footprint records in the input files")
    if not o["keep_bad_quality"]:
        records = lidar.filter_quality(records)
        if not records:
            raise ValidationFailure("no records left after the quality filter")
    if o["harmonize"]:
        records, info = fusion.harmonize_records(records, reference=o["reference"])
    else:
        info = None
    labels, summary = fusion.rasterize_footprints(records, template)
    if info is not None:
        summary.reference = info["reference"]
        summary.n_transformed = info["n_transformed"]
        summary.n_clamped = info["n_clamped"]
    log.info("fused %d records onto %d labeled pixels",
             summary.n_in_bounds, labels.n_labeled)
    fused = geo.RasterGrid(
        np.concatenate(
            [labels.labels.data, labels.counts.astype(np.float32)[np.newaxis]]
        ),
        template.transform,
        template.nodata,
    )
    summary_rows = [
        ["records_in", summary.n_input],
        ["records_rasterized", summary.n_in_bounds],
        ["records_out_of_bounds", summary.n_out_of_bounds],
        ["pixels_labeled", labels.n_labeled],
    ]
    for source in sorted(summary.per_source):
        summary_rows.append([f"records_from_{source}", summary.per_source[source]])
    if summary.reference is not None:
        summary_rows.extend(
            [
                ["harmonize_reference", summary.reference],
                ["records_transformed", summary.n_transformed],
                ["records_clamped", summary.n_clamped],
            ]
        )
    outputs = {
        "fused_labels.chmr": geo.raster_to_bytes(fused),
        "fusion_summary.csv": _csv_bytes(["item", "value"], summary_rows),
        "fused_labels.png": report.fig_label_map(
            labels.labels.data[0], labels.counts
        ),
    }
    return outputs, inputs


def run_train(o: dict):
    samples, stats, inputs = _load_training_inputs(o)
    config = _train_config_from(o)
    model_config = _model_config_from(o)
    result = training.train_loop(samples, config, model_config=model_config)
    result.model.channel_stats = stats
    log.info("best epoch %d, validation loss %.4f",
             result.best_epoch, result.best_val_loss)
    outputs = {
        "checkpoint.prfx": model_to_bytes(result.model),
        "trace.csv": training.trace_csv_text(result.trace).encode("utf-8"),
        "loss_curve.png": report.fig_loss_curve(result.trace),
    }
    return outputs, inputs


def _load_checkpoint(path: str) -> PyramidRegressor:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def _predicted_map(o: dict, inputs: list) -> geo.RasterGrid:
    ckpt_path = _require_file(o["checkpoint"], "checkpoint")
    bands_path = _require_file(o["bands"], "bands")
    inputs.extend([ckpt_path, bands_path])
    model = _load_checkpoint(ckpt_path)
    selected = _select_bands(geo.read_raster(bands_path), o["band_subset"])
    if model.in_channels != selected.bands:
        raise ValidationFailure(
            f"model expects {model.in_channels} input channels, "
            f"raster has {selected.bands}"
        )
    _check_patch_step(o["patch"], o["step"], selected)
    return evaluation.predict_map(model, selected, o["patch"], o["step"])


def run_predict(o: dict):
    inputs: list = []
    pred = _predicted_map(o, inputs)
    outputs = {
        "chm_pred.chmr": geo.raster_to_bytes(pred),
        "chm_pred.png": report.fig_height_map(
            pred, title="predicted canopy height (m)"
        ),
    }
    return outputs, inputs


def run_evaluate(o: dict):
    truth_path = _require_file(o["truth"], "truth")
    if (o["pred"] is None) == (o["checkpoint"] is None):
        raise ValidationFailure(
            "evaluate needs exactly one of --pred or --checkpoint (with --bands)"
        )
    inputs = [truth_path]
    if o["pred"] is not None:
        pred_path = _require_file(o["pred"], "pred")
        inputs.append(pred_path)
        pred = geo.read_raster(pred_path)
    else:
        if o["bands"] is None:
            raise ValidationFailure("evaluate with --checkpoint also needs --bands")
        pred = _predicted_map(o, inputs)
    truth = geo.read_raster(truth_path)
    rep = evaluation.metrics_from_rasters(pred, truth)
    log.info("rmse %.3f m over %d pixels", rep.rmse, rep.n)
    both = pred.valid_mask()[0] & truth.valid_mask()[0]
    pred_values = pred.data[0][both].astype(np.float64)
    truth_values = truth.data[0][both].astype(np.float64)
    cdf = evaluation.cumulative_height_distribution(truth_values)
    outputs = {
        "metrics.csv": evaluation.metrics_csv_text(rep).encode("utf-8"),
        "binned_mae.csv": evaluation.binned_mae_csv_text(rep).encode("utf-8"),
        "binned_mae.png": report.fig_binned_mae(rep.binned_mae),
        "scatter.png": report.fig_scatter(pred_values, truth_values),
        "cdf.png": report.fig_cdf(cdf),
    }
    return outputs, inputs


def run_cv_random(o: dict):
    samples, _, inputs = _load_training_inputs(o)
    if o["k"] < 2:
        raise ValidationFailure(f"k must be >= 2, got {o['k']}")
    if o["k"] > len(samples):
        raise ValidationFailure(
            f"k={o['k']} exceeds the {len(samples)} available samples"
        )
    config = _train_config_from(o)
    model_config = _model_config_from(o)

    def train_fn(train_samples):
        return training.train_loop(train_samples, config,
                                   model_config=model_config).model

    rep = evaluation.kfold_random(
        samples, o["k"], seed=o["seed"], train_fn=train_fn,
        eval_fn=_masked_eval_fn,
    )
    log.info("%d-fold rmse %.3f m", o["k"], rep.rmse)
    outputs = {
        "cv_metrics.csv": evaluation.metrics_csv_text(rep).encode("utf-8"),
        "cv_binned_mae.csv": evaluation.binned_mae_csv_text(rep).encode("utf-8"),
        "cv_binned_mae.png": report.fig_binned_mae(rep.binned_mae),
    }
    return outputs, inputs


def run_cv_geo(o: dict):
    if o["region_map"] is None:
        raise ValidationFailure("cv-geo requires --region-map")
    samples, _, inputs = _load_training_inputs(o)
    available = sorted({s.region for s in samples})
    train_regions = o["train_regions"]
    test_regions = o["test_regions"]
    if o["mode"] == "transfer":
        if not train_regions or not test_regions:
            raise ValidationFailure(
                "transfer mode requires --train-regions and --test-regions"
            )
        overlap = sorted(set(train_regions) & set(test_regions))
        if overlap:
            raise ValidationFailure(
                f"train/test regions overlap: {', '.join(overlap)}"
            )
        missing = sorted(
            (set(train_regions) | set(test_regions)) - set(available)
        )
        if missing:
            raise ValidationFailure(
                f"unknown region(s) {', '.join(missing)}; "
                f"available: {', '.join(available)}"
            )
    elif len(available) < 2:
        raise ValidationFailure(
            f"holdout mode needs at least 2 regions, found {len(available)}"
        )
    config = _train_config_from(o)
    model_config = _model_config_from(o)

    def train_fn(train_samples):
        return training.train_loop(train_samples, config,
                                   model_config=model_config).model

    reports = evaluation.geographic_cv(
        samples, mode=o["mode"], train_fn=train_fn, eval_fn=_masked_eval_fn,
        train_regions=train_regions, test_regions=test_regions,
    )
    rows = [
        [region, repr(float(rep.rmse)), repr(float(rep.mae)),
         repr(float(rep.me)), int(rep.n)]
        for region, rep in sorted(reports.items())
    ]
    outputs = {
        "cv_geo_metrics.csv": _csv_bytes(
            ["region", "rmse", "mae", "me", "n"], rows
        ),
    }
    return outputs, inputs


def run_potential(o: dict):
    pred_path = _require_file(o["pred"], "pred")
    inputs = [pred_path]
    pred = geo.read_raster(pred_path)
    if pred.bands != 1:
        raise ValidationFailure(
            f"prediction raster must be single-band, got {pred.bands}"
        )
    if (o["truth"] is None) == (o["accuracy_csv"] is None):
        raise ValidationFailure(
            "potential needs exactly one of --truth or --accuracy-csv"
        )
    if o["truth"] is not None:
        truth_path = _require_file(o["truth"], "truth")
        inputs.append(truth_path)
        truth = geo.read_raster(truth_path)
        both = pred.valid_mask()[0] & truth.valid_mask()[0]
        if not both.any():
            raise ValidationFailure(
                "prediction and truth share no valid pixels"
            )
        table = evaluation.interval_accuracy(
            pred.data[0][both], truth.data[0][both], tolerance=o["tolerance"]
        )
    else:
        table_path = _require_file(o["accuracy_csv"], "accuracy-csv")
        inputs.append(table_path)
        table = _read_accuracy_csv(table_path)
    valid_values = pred.data[0][pred.valid_mask()[0]]
    tall = valid_values[valid_values >= o["threshold"]]
    needed = {
        float(low) for low in np.floor(tall / evaluation.BIN_WIDTH_M)
        * evaluation.BIN_WIDTH_M
    }
    missing = sorted(needed - set(table))
    if missing:
        raise ValidationFailure(
            "accuracy table is missing bin(s): "
            + ", ".join(str(int(b)) for b in missing)
        )
    potential = evaluation.giant_tree_potential(
        pred, table, threshold=o["threshold"]
    )
    outputs = {
        "potential.chmr": geo.raster_to_bytes(potential),
        "accuracy_table.csv": _accuracy_table_csv(table),
        "potential.png": report.fig_height_map(
            potential, title="giant-tree potential"
        ),
    }
    return outputs, inputs


# ------------------------------------------------------------ command table

_SEED = Option("seed", _int, 0, help="random seed")
_PATCH = Option("patch", _int, 32, help="tile size in pixels")
_STEP = Option("step", _int, 16, help="tile stride in pixels")
_MC = ModelConfig()
_TC = training.TrainConfig()

_MODEL_OPTIONS = [
    Option("entry_widths", _int_tuple, _MC.entry_widths,
           help="entry stage widths, e.g. 16,16,16"),
    Option("blocks", _int, _MC.num_blocks, help="number of pyramid blocks"),
    Option("branches", _int_tuple, _MC.branches,
           help="kernel sizes per block, e.g. 1,3,5,7"),
    Option("pool_branch", _bool, _MC.pool_branch,
           help="include the pooling branch (true/false)"),
    Option("branch_channels", _int, _MC.branch_channels,
           help="channels per branch (default: derived)"),
    Option("residual", _bool, _MC.residual, help="residual blocks (true/false)"),
]

_TRAIN_OPTIONS = [
    Option("batch_size", _int, _TC.batch_size),
    Option("lr", _float, _TC.lr),
    Option("milestones", _int_tuple, _TC.milestones,
           help="iteration milestones for lr decay, e.g. 400000,700000"),
    Option("lr_gamma", _float, _TC.lr_gamma),
    Option("epochs", _int, _TC.epochs),
    Option("iters_per_epoch", _int, _TC.iters_per_epoch),
    Option("grad_clip", _float, _TC.grad_clip),
    Option("l2_lambda", _float, _TC.l2_lambda),
    Option("beta1", _float, _TC.beta1),
    Option("beta2", _float, _TC.beta2),
    Option("epsilon", _float, _TC.epsilon),
    Option("val_fraction", _float, _TC.val_fraction),
]

_DATA_OPTIONS = [
    Option("bands", _str, required=True, help="band raster (.chmr)"),
    Option("labels", _str, required=True,
           help="fused label raster (.chmr, 2 bands)"),
    Option("region_map", _str, None, help="region-code raster (.chmr)"),
    Option("band_subset", _int_tuple, None,
           help="comma-separated band indices to use"),
    _PATCH,
    _STEP,
]

_COMMANDS: dict = {
    "synth": (
        "generate a synthetic scene with footprints and a photon track",
        [
            _SEED,
            Option("width", _int, 96), Option("height", _int, 96),
            Option("bands", _int, 4, help="number of spectral bands"),
            Option("height_field", _choice("smooth", "ridged", "patchy"),
                   "patchy"),
            Option("band_model", _choice("invertible", "noisy"), "invertible"),
            Option("band_noise_sigma", _float, 0.0),
            Option("regions", _dims, (2, 2), help="region grid, e.g. 2x2"),
            Option("gedi_n", _int, 600, help="GEDI footprint count"),
            Option("icesat_n", _int, 200, help="ICESat-2 footprint count"),
            Option("footprint_noise_sigma", _float, 0.0),
            Option("dropout", _float, 0.0),
            Option("bad_quality_fraction", _float, 0.0),
            Option("photons_per_meter", _float, 2.0),
            Option("noise_rate", _float, 0.5),
            Option("track_row_frac", _float, 0.5,
                   help="vertical position of the photon track in (0, 1)"),
        ],
        run_synth,
    ),
    "denoise": (
        "label a photon track as signal/noise with density clustering",
        [
            _SEED,
            Option("photons", _str, required=True, help="photon CSV"),
            Option("eps", _float, lidar.DEFAULT_EPS),
            Option("min_pts", _int, lidar.DEFAULT_MIN_PTS),
        ],
        run_denoise,
    ),
    "steps": (
        "summarize canopy top/ground per along-track step",
        [
            _SEED,
            Option("photons", _str, required=True, help="photon CSV"),
            Option("eps", _float, lidar.DEFAULT_EPS),
            Option("min_pts", _int, lidar.DEFAULT_MIN_PTS),
            Option("step_m", _float, 10.0, help="along-track bucket (m)"),
        ],
        run_steps,
    ),
    "waveform-rh": (
        "simulate a large-footprint waveform and extract RH percentiles",
        [
            _SEED,
            Option("photons", _str, required=True, help="photon CSV"),
            Option("center_along", _float, required=True,
                   help="footprint center along the track (m)"),
            Option("eps", _float, lidar.DEFAULT_EPS),
            Option("min_pts", _int, lidar.DEFAULT_MIN_PTS),
            Option("diameter", _float, lidar.DEFAULT_FOOTPRINT_DIAMETER),
            Option("sigma_bins", _float, lidar.DEFAULT_SMOOTH_SIGMA_BINS),
            Option("bin_size", _float, lidar.DEFAULT_BIN_SIZE),
        ],
        run_waveform_rh,
    ),
    "fuse": (
        "rasterize footprint records onto a band raster's grid",
        [
            _SEED,
            Option("bands", _str, required=True, help="band raster (.chmr)"),
            Option("footprints", _str, required=True, multi=True,
                   help="footprint CSV file(s)"),
            Option("reference", _choice("GEDI", "ICESAT2"), "GEDI"),
            Option("harmonize", _bool, True),
            Option("keep_bad_quality", _bool, False),
        ],
        run_fuse,
    ),
    "train": (
        "train a height regressor on fused labels",
        [_SEED] + _DATA_OPTIONS + _MODEL_OPTIONS + _TRAIN_OPTIONS,
        run_train,
    ),
    "predict": (
        "predict a wall-to-wall height map from a checkpoint",
        [
            _SEED,
            Option("checkpoint", _str, required=True),
            Option("bands", _str, required=True, help="band raster (.chmr)"),
            Option("band_subset", _int_tuple, None),
            _PATCH,
            _STEP,
        ],
        run_predict,
    ),
    "evaluate": (
        "score a predicted map against a reference map",
        [
            _SEED,
            Option("truth", _str, required=True, help="reference raster"),
            Option("pred", _str, None, help="predicted raster"),
            Option("checkpoint", _str, None,
                   help="predict internally from this checkpoint"),
            Option("bands", _str, None, help="band raster for --checkpoint"),
            Option("band_subset", _int_tuple, None),
            _PATCH,
            _STEP,
        ],
        run_evaluate,
    ),
    "cv-random": (
        "random k-fold cross-validation",
        [_SEED, Option("k", _int, 5)] + _DATA_OPTIONS + _MODEL_OPTIONS
        + _TRAIN_OPTIONS,
        run_cv_random,
    ),
    "cv-geo": (
        "geographic cross-validation (holdout or transfer)",
        [
            _SEED,
            Option("mode", _choice("holdout", "transfer"), "holdout"),
            Option("train_regions", _str, None, multi=True,
                   help="regions to train on (transfer mode)"),
            Option("test_regions", _str, None, multi=True,
                   help="regions to score (transfer mode)"),
        ] + _DATA_OPTIONS + _MODEL_OPTIONS + _TRAIN_OPTIONS,
        run_cv_geo,
    ),
    "potential": (
        "map giant-tree potential from a predicted height map",
        [
            _SEED,
            Option("pred", _str, required=True, help="predicted raster"),
            Option("truth", _str, None,
                   help="reference raster to derive interval accuracies"),
            Option("accuracy_csv", _str, None,
                   help="interval-accuracy table (bin_low_m,accuracy)"),
            Option("tolerance", _float, 10.0),
            Option("threshold", _float, 80.0),
        ],
        run_potential,
    ),
}


# ------------------------------------------------------------------- driver


def _configure_logging() -> None:
    name = os.environ.get("CANOPYFUSE_LOG", "warn").strip().lower()
    level = _LOG_LEVELS.get(name)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s")
        )
        log.addHandler(handler)
        log.propagate = False
    log.setLevel(logging.WARNING if level is None else level)
    if level is None and name != "warn":
        log.warning("unknown CANOPYFUSE_LOG level %r; using warn", name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canopyfuse",
        description="canopy-height mapping pipeline",
    )
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    for name, (help_text, options, _runner) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--config", default=None,
                       help="key = value config file; flags override it")
        for o in options:
            flag = "--" + o.name.replace("_", "-")
            if o.multi:
                p.add_argument(flag, dest=o.name, nargs="+", default=None,
                               help=o.help or None)
            else:
                p.add_argument(flag, dest=o.name, default=None,
                               help=o.help or None)
    return parser


def _sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _write_run(out_dir: str, command: str, resolved: dict, inputs: list,
               outputs: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in resolved.items()},
        "inputs": {str(p): _sha256_file(str(p)) for p in inputs},
        "outputs": {name: _sha256_bytes(blob) for name, blob in outputs.items()},
        "versions": {
            "canopyfuse": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    for name in sorted(outputs):
        geo.atomic_write_bytes(os.path.join(out_dir, name), outputs[name])
    payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    geo.atomic_write_bytes(
        os.path.join(out_dir, "manifest.json"), payload.encode("utf-8")
    )
    log.info("wrote %d file(s) to %s", len(outputs) + 1, out_dir)


def main(argv) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    _help, options, runner = _COMMANDS[args.command]
    try:
        file_cfg = _parse_config_file(args.config) if args.config else {}
        resolved = _resolve_options(args, file_cfg, options, args.command)
        outputs, inputs = runner(resolved)
        _write_run(args.out, args.command, resolved, inputs, outputs)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - process boundary, sets exit code
        print(f"error: {exc}", file=sys.stderr)
        log.debug("runtime failure", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
