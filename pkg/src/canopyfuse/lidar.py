"""Photon-counting LiDAR processing: density denoising, 10 m canopy steps,
footprint waveform simulation, and relative-height (RH) extraction.

Distances for the density filter are Euclidean in the (along_track, elevation)
plane with both axes in meters.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geo import atomic_write_bytes

SIGNAL = "signal"
NOISE = "noise"

DEFAULT_EPS = 8.9
DEFAULT_MIN_PTS = 11

DEFAULT_BIN_SIZE = 0.15
DEFAULT_FOOTPRINT_DIAMETER = 25.0
DEFAULT_SMOOTH_SIGMA_BINS = 2.0
KERNEL_TRUNCATION_SIGMAS = 4.0

DEFAULT_RH_PERCENTILES = (10, 20, 30, 40, 50, 60, 70, 80, 90, 98)

SOURCES = ("GEDI", "ICESAT2", "UAVLS")
MAX_CANOPY_HEIGHT = 150.0

FOOTPRINT_FIELDS = ("x", "y", "canopy_height", "source", "quality")
PHOTON_FIELDS = ("along_track", "elevation")


class EmptyFootprintError(ValueError):
    """No points fall inside the footprint."""


@dataclass(frozen=True)
class PhotonEvent:
    """A single photon return on a ground track."""

    along_track: float
    elevation: float

    def __post_init__(self):
        if not (np.isfinite(self.along_track) and np.isfinite(self.elevation)):
            raise ValueError("photon coordinates must be finite")
        if self.along_track < 0:
            raise ValueError(f"along_track must be >= 0, got {self.along_track}")


@dataclass(frozen=True)
class CanopyStep:
    """Per-step canopy summary: top/ground elevations over a 10 m bucket."""

    center: float
    canopy_top: float
    ground: float
    height: float


@dataclass
class Waveform:
    """Binned return-energy profile; bin i covers
    [elev0 + i*bin_size, elev0 + (i+1)*bin_size)."""

    bin_energy: np.ndarray
    bin_size: float = DEFAULT_BIN_SIZE
    elev0: float = 0.0

    def __post_init__(self):
        e = np.asarray(self.bin_energy, dtype=np.float64)
        if e.ndim != 1 or e.size == 0:
            raise ValueError("bin_energy must be a non-empty 1-D array")
        if not np.isfinite(e).all():
            raise ValueError("bin energies must be finite")
        if (e < 0).any():
            raise ValueError("bin energies must be >= 0")
        if e.sum() <= 0:
            raise ValueError("waveform must contain positive energy")
        if not (self.bin_size > 0 and np.isfinite(self.bin_size)):
            raise ValueError(f"bin_size must be > 0, got {self.bin_size}")
        self.bin_energy = e

    @property
    def total_energy(self) -> float:
        return float(self.bin_energy.sum())


@dataclass(frozen=True)
class RHProfile:
    """Relative-height percentiles: height at which the cumulative energy
    reaches p% of the total, measured from elev0 upward."""

    heights: dict[int, float]

    def __post_init__(self):
        items = sorted(self.heights.items())
        hs = [h for _, h in items]
        if any(h2 < h1 for h1, h2 in zip(hs, hs[1:])):
            raise ValueError("RH heights must be non-decreasing in percentile")


@dataclass(frozen=True)
class FootprintRecord:
    """A georeferenced canopy-height observation from one LiDAR footprint."""

    x: float
    y: float
    canopy_height: float
    source: str
    quality: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("footprint coordinates must be finite")
        if not np.isfinite(self.canopy_height) or not (
            0.0 <= self.canopy_height <= MAX_CANOPY_HEIGHT
        ):
            raise ValueError(
                f"canopy_height must be within [0, {MAX_CANOPY_HEIGHT}], "
                f"got {self.canopy_height}"
            )
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}, expected one of {SOURCES}")
        if self.quality not in (0, 1):
            raise ValueError(f"quality must be 0 or 1, got {self.quality}")


# ----------------------------------------------------------------- denoising


def dbscan_label(
    photons: list[PhotonEvent],
    eps: float = DEFAULT_EPS,
    min_pts: int = DEFAULT_MIN_PTS,
) -> list[str]:
    """Density-based signal/noise labels per photon.

    A photon is *core* when at least ``min_pts`` photons (itself included)
    lie within ``eps`` of it; core photons and photons within ``eps`` of a
    core photon are signal, everything else noise. Border photons do not
    chain: proximity to a non-core signal photon is not enough.
    """
    if not (eps > 0 and np.isfinite(eps)):
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    if not photons:
        return []
    pts = np.array([(p.along_track, p.elevation) for p in photons], dtype=np.float64)
    tree = cKDTree(pts)
    neighbor_lists = tree.query_ball_point(pts, r=eps)
    counts = np.fromiter((len(nb) for nb in neighbor_lists), dtype=np.int64)
    core = counts >= min_pts
    signal = core.copy()
    for i in np.flatnonzero(~core):
        if core[neighbor_lists[i]].any():
            signal[i] = True
    return [SIGNAL if s else NOISE for s in signal]


# -------------------------------------------------------------- canopy steps


def classify_canopy_steps(
    photons: list[PhotonEvent], step: float = 10.0
) -> list[CanopyStep]:
    """Bucket signal photons into fixed along-track steps and summarize each.

    Bucket k covers along_track in [k*step, (k+1)*step). Buckets holding
    fewer than 2 photons are dropped (top and ground are indistinguishable).
    """
    if not (step > 0 and np.isfinite(step)):
        raise ValueError(f"step must be > 0, got {step}")
    if not photons:
        return []
    along = np.array([p.along_track for p in photons])
    elev = np.array([p.elevation for p in photons])
    buckets = np.floor(along / step).astype(np.int64)
    steps = []
    for k in np.unique(buckets):
        sel = buckets == k
        if sel.sum() < 2:
            continue
        top = float(elev[sel].max())
        ground = float(elev[sel].min())
        steps.append(
            CanopyStep(
                center=float((k + 0.5) * step),
                canopy_top=top,
                ground=ground,
                height=top - ground,
            )
        )
    return steps


# ----------------------------------------------------------------- waveforms


def simulate_waveform(
    points,
    center: tuple[float, float],
    diameter: float = DEFAULT_FOOTPRINT_DIAMETER,
    sigma_bins: float = DEFAULT_SMOOTH_SIGMA_BINS,
    bin_size: float = DEFAULT_BIN_SIZE,
) -> Waveform:
    """Simulate a large-footprint return waveform from (x, y, z) points.

    Points within diameter/2 of the center contribute energy
    exp(-d^2 / (2 sigma_f^2)) with sigma_f = diameter/4, histogrammed into
    ``bin_size`` elevation bins from z = 0 and smoothed with a Gaussian of
    ``sigma_bins`` bins truncated at +/-4 sigma and renormalized. Upward
    smear is kept in extra top bins; below-ground smear is folded into bin 0
    so total energy is conserved.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyFootprintError("no points supplied")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (n, 3) xyz, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point coordinates must be finite")
    if (pts[:, 2] < 0).any():
        raise ValueError("elevations must be >= 0")
    if diameter <= 0 or sigma_bins <= 0 or bin_size <= 0:
        raise ValueError("diameter, sigma_bins, and bin_size must be > 0")

    d = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    inside = d <= diameter / 2.0
    if not inside.any():
        raise EmptyFootprintError(
            f"no points within {diameter / 2.0} m of footprint center"
        )
    z = pts[inside, 2]
    sigma_f = diameter / 4.0
    w = np.exp(-(d[inside] ** 2) / (2.0 * sigma_f**2))

    radius = int(math.ceil(KERNEL_TRUNCATION_SIGMAS * sigma_bins))
    n_base = int(np.floor(z.max() / bin_size)) + 1
    hist = np.zeros(n_base + radius, dtype=np.float64)
    idx = np.minimum(np.floor(z / bin_size).astype(np.int64), n_base - 1)
    np.add.at(hist, idx, w)

    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma_bins**2))
    kernel /= kernel.sum()

    full = np.convolve(hist, kernel)  # index i <-> signed bin i - radius
    energy = full[radius : radius + hist.size].copy()
    energy[0] += full[:radius].sum()  # fold below-ground smear into bin 0
    energy[energy < 0] = 0.0  # guard against -0.0 / roundoff dust
    return Waveform(bin_energy=energy, bin_size=bin_size, elev0=0.0)


# -------------------------------------------------------------------- RH


def extract_rh(
    waveform: Waveform, percentiles=DEFAULT_RH_PERCENTILES
) -> RHProfile:
    """Relative heights: the elevation at which cumulative energy (bottom-up)
    first reaches p% of the total, linearly interpolated within the bin."""
    for p in percentiles:
        if not 0 < p <= 100:
            raise ValueError(f"percentiles must lie in (0, 100], got {p}")
    e = waveform.bin_energy
    cum = np.cumsum(e)
    total = cum[-1]
    heights = {}
    for p in percentiles:
        target = (p / 100.0) * total
        k = int(np.searchsorted(cum, target, side="left"))
        k = min(k, e.size - 1)
        prev = cum[k - 1] if k > 0 else 0.0
        frac = (target - prev) / e[k]
        heights[int(p)] = float(waveform.elev0 + (k + frac) * waveform.bin_size)
    return RHProfile(heights=heights)


# ------------------------------------------------------------------ quality


def filter_quality(records: list[FootprintRecord]) -> list[FootprintRecord]:
    """Keep only records whose quality flag is exactly 1."""
    return [r for r in records if r.quality == 1]


# ------------------------------------------------------------------- CSV IO


def footprints_csv_text(records: list[FootprintRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FOOTPRINT_FIELDS)
    for r in records:
        writer.writerow(
            [repr(float(r.x)), repr(float(r.y)), repr(float(r.canopy_height)), r.source, r.quality]
        )
    return buf.getvalue()


def write_footprints_csv(records: list[FootprintRecord], path: str) -> None:
    atomic_write_bytes(path, footprints_csv_text(records).encode("utf-8"))


def read_footprints_csv(path: str) -> list[FootprintRecord]:
    records = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FOOTPRINT_FIELDS:
            raise ValueError(
                f"{os.path.basename(path)}: bad header {header!r}, "
                f"expected {','.join(FOOTPRINT_FIELDS)}"
            )
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{os.path.basename(path)} row {i}: expected 5 fields")
            try:
                records.append(
                    FootprintRecord(
                        x=float(row[0]),
                        y=float(row[1]),
                        canopy_height=float(row[2]),
                        source=row[3].strip(),
                        quality=int(row[4]),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{os.path.basename(path)} row {i}: {exc}") from exc
    return records


def photons_csv_text(photons: list[PhotonEvent]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PHOTON_FIELDS)
    for p in photons:
        writer.writerow([repr(float(p.along_track)), repr(float(p.elevation))])
    return buf.getvalue()


def write_photons_csv(photons: list[PhotonEvent], path: str) -> None:
    atomic_write_bytes(path, photons_csv_text(photons).encode("utf-8"))


def read_photons_csv(path: str) -> list[PhotonEvent]:
    photons = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PHOTON_FIELDS:
            raise ValueError(
                f"{os.path.basename(path)}: bad header {header!r}, "
                f"expected {','.join(PHOTON_FIELDS)}"
            )
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{os.path.basename(path)} row {i}: expected 2 fields")
            try:
                photons.append(
                    PhotonEvent(along_track=float(row[0]), elevation=float(row[1]))
                )
            except ValueError as exc:
                raise ValueError(f"{os.path.basename(path)} row {i}: {exc}") from exc
    return photons
