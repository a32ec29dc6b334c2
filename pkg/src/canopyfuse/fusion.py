"""Fusing sparse footprint observations with raster imagery: cross-sensor
harmonization, rasterization onto the image grid, and training-sample assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geo import RasterGrid
from .lidar import MAX_CANOPY_HEIGHT, FootprintRecord

REFERENCE_SOURCE = "GEDI"
SECONDARY_SOURCES = ("ICESAT2",)


@dataclass
class SparseLabelGrid:
    """Per-pixel mean footprint height plus the contributing-record counts.

    ``labels`` holds valid values exactly where ``counts`` > 0.
    """

    labels: RasterGrid
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if self.labels.bands != 1:
            raise ValueError("label grid must be single-band")
        if counts.shape != (self.labels.height, self.labels.width):
            raise ValueError(
                f"counts shape {counts.shape} != label grid "
                f"{(self.labels.height, self.labels.width)}"
            )
        if (counts < 0).any():
            raise ValueError("counts must be >= 0")
        valid = self.labels.valid_mask()[0]
        if not np.array_equal(valid, counts > 0):
            raise ValueError("labels must be valid exactly where counts > 0")
        self.counts = counts

    @property
    def n_labeled(self) -> int:
        return int((self.counts > 0).sum())


@dataclass
class FusionSummary:
    """Bookkeeping for a fuse run, rendered into the run report."""

    n_input: int = 0
    n_in_bounds: int = 0
    n_out_of_bounds: int = 0
    per_source: dict = field(default_factory=dict)
    n_transformed: int = 0
    n_clamped: int = 0
    reference: str | None = None

    def to_lines(self) -> list[str]:
        lines = [
            f"records in: {self.n_input}",
            f"records rasterized: {self.n_in_bounds}",
            f"records out of bounds: {self.n_out_of_bounds}",
        ]
        for src in sorted(self.per_source):
            lines.append(f"  {src}: {self.per_source[src]}")
        if self.reference is not None:
            lines.append(
                f"harmonized to {self.reference}: {self.n_transformed} transformed, "
                f"{self.n_clamped} clamped"
            )
        return lines


def harmonize(heights, ref_mean: float, ref_std: float) -> np.ndarray:
    """Moment-match heights onto a reference distribution:
    h' = (h - mean) / std * ref_std + ref_mean (population std)."""
    h = np.asarray(heights, dtype=np.float64)
    if h.ndim != 1 or h.size < 2:
        raise ValueError(f"need >= 2 heights to harmonize, got {h.size}")
    if not np.isfinite(h).all():
        raise ValueError("heights must be finite")
    if not (ref_std > 0 and np.isfinite(ref_std) and np.isfinite(ref_mean)):
        raise ValueError(f"reference std must be > 0, got {ref_std}")
    mu = h.mean()
    sd = h.std()
    if sd == 0.0:
        raise ValueError("source heights have zero variance")
    return (h - mu) / sd * ref_std + ref_mean


def harmonize_records(
    records: list[FootprintRecord],
    reference: str = REFERENCE_SOURCE,
    secondary: tuple[str, ...] = SECONDARY_SOURCES,
) -> tuple[list[FootprintRecord], dict]:
    """Map secondary-source heights onto the reference source's moments.

    Reference and any untouched sources pass through unchanged. Transformed
    heights are clamped into [0, 150]; the clamp count is reported. With no
    secondary records present this is a no-op.
    """
    ref_heights = np.array(
        [r.canopy_height for r in records if r.source == reference], dtype=np.float64
    )
    info = {
        "reference": reference,
        "ref_mean": None,
        "ref_std": None,
        "n_transformed": 0,
        "n_clamped": 0,
    }
    sec_idx = [i for i, r in enumerate(records) if r.source in secondary]
    if not sec_idx:
        return list(records), info
    if ref_heights.size < 2 or ref_heights.std() == 0.0:
        raise ValueError(
            f"cannot harmonize: reference source {reference!r} has "
            f"{ref_heights.size} records / zero spread"
        )
    ref_mean = float(ref_heights.mean())
    ref_std = float(ref_heights.std())
    sec_heights = np.array([records[i].canopy_height for i in sec_idx])
    mapped = harmonize(sec_heights, ref_mean, ref_std)
    clamped = np.clip(mapped, 0.0, MAX_CANOPY_HEIGHT)
    out = list(records)
    for j, i in enumerate(sec_idx):
        out[i] = replace(records[i], canopy_height=float(clamped[j]))
    info.update(
        ref_mean=ref_mean,
        ref_std=ref_std,
        n_transformed=len(sec_idx),
        n_clamped=int((mapped != clamped).sum()),
    )
    return out, info


def rasterize_footprints(
    records: list[FootprintRecord], template: RasterGrid
) -> tuple[SparseLabelGrid, FusionSummary]:
    """Average footprint heights into the pixels of ``template``'s grid.

    A record lands in the pixel containing its (x, y): floor of the
    fractional pixel coordinates. Out-of-bounds records are dropped and
    counted in the summary.
    """
    h, w = template.height, template.width
    sums = np.zeros((h, w), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.int64)
    summary = FusionSummary(n_input=len(records))
    if records:
        xs = np.array([r.x for r in records], dtype=np.float64)
        ys = np.array([r.y for r in records], dtype=np.float64)
        hs = np.array([r.canopy_height for r in records], dtype=np.float64)
        cols, rows = template.transform.world_to_pixel(xs, ys)
        ci = np.floor(np.atleast_1d(cols)).astype(np.int64)
        ri = np.floor(np.atleast_1d(rows)).astype(np.int64)
        inside = (ci >= 0) & (ci < w) & (ri >= 0) & (ri < h)
        np.add.at(sums, (ri[inside], ci[inside]), hs[inside])
        np.add.at(counts, (ri[inside], ci[inside]), 1)
        summary.n_in_bounds = int(inside.sum())
        summary.n_out_of_bounds = int((~inside).sum())
        for r, keep in zip(records, inside):
            if keep:
                summary.per_source[r.source] = summary.per_source.get(r.source, 0) + 1
    nodata = np.float32(template.nodata)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), float(nodata))
    labels = RasterGrid(
        means.astype(np.float32)[np.newaxis], template.transform, template.nodata
    )
    return SparseLabelGrid(labels=labels, counts=counts), summary


@dataclass
class Sample:
    """One training example: a band patch plus its sparse label plane."""

    patch: np.ndarray          # (C, p, p) float32, already normalized
    label_values: np.ndarray   # (p, p) float32, 0 where unlabeled
    label_mask: np.ndarray     # (p, p) bool
    origin: tuple[int, int]    # (col0, row0) in the source grid
    sample_id: int
    region: str | None = None

    def __post_init__(self):
        if self.patch.ndim != 3:
            raise ValueError("patch must be (C, p, p)")
        p = self.patch.shape[1:]
        if self.label_values.shape != p or self.label_mask.shape != p:
            raise ValueError("label planes must match the patch extent")
        if not self.label_mask.any():
            raise ValueError("sample must contain at least one labeled pixel")
        if (self.label_values[~self.label_mask] != 0).any():
            raise ValueError("label_values must be 0 off-mask")


def build_samples(
    bands: RasterGrid,
    labels: SparseLabelGrid,
    patch: int,
    step: int,
    region_map: RasterGrid | None = None,
) -> list[Sample]:
    """Tile the band stack and keep every patch that contains >= 1 label.

    ``bands`` and ``labels`` must live on the same grid; band values are
    expected to be normalized already. When ``region_map`` is given, each
    sample is tagged "R<code>" from the region value at its patch center.
    """
    from .geo import tile_patches  # local import keeps module deps one-way

    lab = labels.labels
    if (bands.height, bands.width) != (lab.height, lab.width):
        raise ValueError(
            f"band grid {(bands.height, bands.width)} != label grid "
            f"{(lab.height, lab.width)}"
        )
    if bands.transform != lab.transform:
        raise ValueError("band and label transform differ")
    if region_map is not None:
        if (region_map.height, region_map.width) != (bands.height, bands.width):
            raise ValueError("region map shape differs from band grid")
    samples = []
    mask_full = labels.counts > 0
    for sample_id, (c0, r0) in enumerate(tile_patches(bands, patch, step)):
        window_mask = mask_full[r0 : r0 + patch, c0 : c0 + patch]
        if not window_mask.any():
            continue
        values = lab.data[0, r0 : r0 + patch, c0 : c0 + patch]
        region = None
        if region_map is not None:
            code = region_map.data[0, r0 + patch // 2, c0 + patch // 2]
            region = f"R{int(code)}"
        samples.append(
            Sample(
                patch=bands.data[:, r0 : r0 + patch, c0 : c0 + patch].copy(),
                label_values=np.where(window_mask, values, np.float32(0.0)),
                label_mask=window_mask.copy(),
                origin=(c0, r0),
                sample_id=sample_id,
                region=region,
            )
        )
    return samples
