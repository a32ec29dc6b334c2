"""Georeferenced raster grids, affine pixel/world mapping, and CHMR raster files.

Pixel convention: pixel (col, row) covers the half-open square
[col, col+1) x [row, row+1) in pixel space; integer coordinates are the
upper-left corner of the pixel, and a world point maps into the pixel whose
indices are floor(col), floor(row).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

DEFAULT_NODATA = -9999.0

# Refuse to allocate rasters above this many cells (file headers are untrusted).
MAX_RASTER_CELLS = 2 ** 31

_CHMR_MAGIC = b"CHMR"
_CHMR_VERSION = 1
# magic, version, width, height, bands, affine a..f, nodata
_CHMR_HEADER = struct.Struct("<4sIIII6df")


class RasterError(ValueError):
    """Base class for raster construction / IO problems."""


class RasterFormatError(RasterError):
    """Malformed CHMR byte stream."""


class BadMagicError(RasterFormatError):
    pass


class VersionMismatchError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class DimensionOverflowError(RasterFormatError):
    pass


class DegenerateBandError(RasterError):
    """A band has too few valid pixels or zero variance."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write bytes to ``path`` via a temp file + rename so readers never see
    a partially written file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class AffineTransform:
    """Affine pixel->world map: x = a*col + b*row + c, y = d*col + e*row + f.

    Must be invertible; |a*e - b*d| below 1e-12 is rejected.
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        coeffs = (self.a, self.b, self.c, self.d, self.e, self.f)
        if not all(np.isfinite(coeffs)):
            raise ValueError("affine coefficients must be finite")
        if abs(self.det) < 1e-12:
            raise ValueError(
                f"affine transform is singular: |det| = {abs(self.det):g} < 1e-12"
            )

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    def pixel_to_world(self, col, row):
        """Map fractional pixel coordinates to world (x, y). Vectorized."""
        col = np.asarray(col, dtype=np.float64)
        row = np.asarray(row, dtype=np.float64)
        x = self.a * col + self.b * row + self.c
        y = self.d * col + self.e * row + self.f
        if x.ndim == 0:
            return float(x), float(y)
        return x, y

    def world_to_pixel(self, x, y):
        """Invert the map: world (x, y) -> fractional (col, row). Vectorized."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inv_det = 1.0 / self.det
        dx = x - self.c
        dy = y - self.f
        col = (self.e * dx - self.b * dy) * inv_det
        row = (-self.d * dx + self.a * dy) * inv_det
        if col.ndim == 0:
            return float(col), float(row)
        return col, row

    def to_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.a, self.b, self.c, self.d, self.e, self.f)


def pixel_to_world(t: AffineTransform, col, row):
    return t.pixel_to_world(col, row)


def world_to_pixel(t: AffineTransform, x, y):
    return t.world_to_pixel(x, y)


@dataclass
class RasterGrid:
    """A georeferenced stack of float32 bands, shape (bands, height, width).

    Every cell is either finite or exactly ``nodata``. ``nodata`` is coerced
    through float32 so the sentinel survives file round-trips bit-exactly.
    """

    data: np.ndarray
    transform: AffineTransform
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[np.newaxis, :, :]
        if arr.ndim != 3:
            raise RasterError(f"raster data must be 2-D or 3-D, got ndim={arr.ndim}")
        bands, height, width = arr.shape
        if bands < 1 or height < 1 or width < 1:
            raise RasterError(f"raster dimensions must be >= 1, got {arr.shape}")
        if bands * height * width > MAX_RASTER_CELLS:
            raise DimensionOverflowError(
                f"raster of {bands}x{height}x{width} cells exceeds the "
                f"{MAX_RASTER_CELLS}-cell limit"
            )
        nodata = float(np.float32(self.nodata))
        if not np.isfinite(nodata):
            raise RasterError("nodata must be finite")
        bad = ~np.isfinite(arr)
        if bad.any():
            raise RasterError(
                f"raster contains {int(bad.sum())} non-finite cells; every cell "
                "must be finite or the nodata sentinel"
            )
        self.data = arr
        self.nodata = nodata

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Per-cell validity, shape (bands, height, width)."""
        return self.data != np.float32(self.nodata)

    def all_bands_valid(self) -> np.ndarray:
        """Per-pixel mask, True where every band holds data."""
        return self.valid_mask().all(axis=0)

    def select_bands(self, indices) -> "RasterGrid":
        indices = list(indices)
        if not indices:
            raise RasterError("band selection is empty")
        for i in indices:
            if not 0 <= i < self.bands:
                raise RasterError(f"band index {i} out of range 0..{self.bands - 1}")
        return RasterGrid(self.data[indices].copy(), self.transform, self.nodata)

    def equals(self, other: "RasterGrid") -> bool:
        return (
            self.data.shape == other.data.shape
            and self.transform == other.transform
            and self.nodata == other.nodata
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class ChannelStats:
    """Per-band mean / population std over valid pixels."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std lengths differ")
        if len(self.mean) == 0:
            raise ValueError("stats for zero bands")
        if any(s <= 0 for s in self.std):
            raise ValueError("channel std must be > 0")
        if not all(np.isfinite(self.mean)) or not all(np.isfinite(self.std)):
            raise ValueError("channel stats must be finite")

    @property
    def bands(self) -> int:
        return len(self.mean)


def compute_channel_stats(raster: RasterGrid, mask: np.ndarray | None = None) -> ChannelStats:
    """Per-band mean and population std over valid (optionally masked) pixels.

    Raises DegenerateBandError naming the band index when a band has fewer
    than 2 contributing pixels or zero variance.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (raster.height, raster.width):
            raise ValueError(
                f"mask shape {mask.shape} != raster shape "
                f"{(raster.height, raster.width)}"
            )
    valid = raster.valid_mask()
    means, stds = [], []
    for b in range(raster.bands):
        sel = valid[b] if mask is None else (valid[b] & mask)
        vals = raster.data[b][sel].astype(np.float64)
        if vals.size < 2:
            raise DegenerateBandError(
                f"band {b}: only {vals.size} valid pixels (need >= 2)"
            )
        mu = float(vals.mean())
        var = float(vals.var())  # population variance
        if var == 0.0:
            raise DegenerateBandError(f"band {b}: zero variance over valid pixels")
        means.append(mu)
        stds.append(float(np.sqrt(var)))
    return ChannelStats(mean=tuple(means), std=tuple(stds))


def normalize(raster: RasterGrid, stats: ChannelStats) -> RasterGrid:
    """Z-score each band with the supplied stats; nodata cells pass through."""
    if stats.bands != raster.bands:
        raise ValueError(
            f"stats cover {stats.bands} bands but raster has {raster.bands}"
        )
    valid = raster.valid_mask()
    out = np.full_like(raster.data, np.float32(raster.nodata))
    for b in range(raster.bands):
        z = (raster.data[b].astype(np.float64) - stats.mean[b]) / stats.std[b]
        out[b] = np.where(valid[b], z.astype(np.float32), np.float32(raster.nodata))
    return RasterGrid(out, raster.transform, raster.nodata)


def _axis_origins(size: int, patch: int, step: int) -> list[int]:
    last = size - patch
    origins = list(range(0, last + 1, step))
    if origins[-1] != last:
        origins.append(last)  # clamp the final window to the edge
    return origins


def tile_patches(raster: RasterGrid, patch: int, step: int) -> list[tuple[int, int]]:
    """Sliding-window patch origins (col0, row0), row-major from (0, 0).

    The final origin along each axis is clamped so the last window ends at
    the raster edge. Patches always fit entirely inside the raster.
    """
    if patch < 1 or step < 1:
        raise ValueError(f"patch and step must be >= 1, got patch={patch} step={step}")
    if patch > raster.width or patch > raster.height:
        raise ValueError(
            f"patch {patch} exceeds raster extent "
            f"{raster.width}x{raster.height}"
        )
    cols = _axis_origins(raster.width, patch, step)
    rows = _axis_origins(raster.height, patch, step)
    return [(c, r) for r in rows for c in cols]


def write_raster(raster: RasterGrid, path: str) -> None:
    """Serialize to the CHMR format (little-endian, band-major float32)."""
    header = _CHMR_HEADER.pack(
        _CHMR_MAGIC,
        _CHMR_VERSION,
        raster.width,
        raster.height,
        raster.bands,
        *raster.transform.to_tuple(),
        raster.nodata,
    )
    payload = np.ascontiguousarray(raster.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def raster_to_bytes(raster: RasterGrid) -> bytes:
    header = _CHMR_HEADER.pack(
        _CHMR_MAGIC,
        _CHMR_VERSION,
        raster.width,
        raster.height,
        raster.bands,
        *raster.transform.to_tuple(),
        raster.nodata,
    )
    return header + np.ascontiguousarray(raster.data, dtype="<f4").tobytes()


def raster_from_bytes(blob: bytes) -> RasterGrid:
    if len(blob) < 4:
        raise TruncatedPayloadError(f"{len(blob)} bytes is too short for a CHMR header")
    if blob[:4] != _CHMR_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {_CHMR_MAGIC!r}")
    if len(blob) < _CHMR_HEADER.size:
        raise TruncatedPayloadError(
            f"header truncated: {len(blob)} bytes < {_CHMR_HEADER.size}"
        )
    (_, version, width, height, bands, a, b, c, d, e, f, nodata) = _CHMR_HEADER.unpack(
        blob[: _CHMR_HEADER.size]
    )
    if version != _CHMR_VERSION:
        raise VersionMismatchError(f"unsupported CHMR version {version}")
    if width < 1 or height < 1 or bands < 1:
        raise RasterFormatError(
            f"invalid dimensions width={width} height={height} bands={bands}"
        )
    n_cells = bands * height * width
    if n_cells > MAX_RASTER_CELLS:
        raise DimensionOverflowError(
            f"declared raster of {n_cells} cells exceeds the "
            f"{MAX_RASTER_CELLS}-cell limit"
        )
    expected = _CHMR_HEADER.size + 4 * n_cells
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: file is {len(blob)} bytes, header declares {expected}"
        )
    if len(blob) > expected:
        raise RasterFormatError(
            f"{len(blob) - expected} trailing bytes after declared payload"
        )
    data = (
        np.frombuffer(blob, dtype="<f4", offset=_CHMR_HEADER.size)
        .astype(np.float32)
        .reshape(bands, height, width)
    )
    transform = AffineTransform(a, b, c, d, e, f)
    return RasterGrid(data, transform, float(nodata))


def read_raster(path: str) -> RasterGrid:
    """Parse a CHMR file; malformed inputs raise a RasterFormatError subclass."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return raster_from_bytes(blob)
