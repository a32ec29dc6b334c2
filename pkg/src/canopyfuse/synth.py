"""Deterministic synthetic data: procedural canopy-height scenes with
correlated spectral bands, spaceborne-style footprint sampling, and photon
track simulation with controllable noise. Every generator is a pure function
of (seed, arguments), so golden tests are byte-stable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import AffineTransform, RasterGrid
from .lidar import MAX_CANOPY_HEIGHT, FootprintRecord, PhotonEvent

__all__ = [
    "Scene",
    "gen_photons",
    "gen_scene",
    "sample_footprints",
]

SCENE_ORIGIN = (500000.0, 4200000.0)
PIXEL_SIZE_M = 10.0
CHM_BASE_MAX_M = 60.0
GIANT_TREE_CAP_M = 110.0

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_PRIME_X = np.uint64(0x8CB92BA72F3D8DD7)
_PRIME_Y = np.uint64(0xD6E8FEB86659FD93)
_PRIME_SEED = np.uint64(0x9E3779B97F4A7C15)
_PRIME_OCTAVE = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """64-bit finalizer hash (splitmix-style avalanche), vectorized."""
    z = np.asarray(z, dtype=np.uint64)
    z = z ^ (z >> np.uint64(30))
    z = (z * _MIX_1) & _MASK64
    z = z ^ (z >> np.uint64(27))
    z = (z * _MIX_2) & _MASK64
    z = z ^ (z >> np.uint64(31))
    return z


def _lattice01(ix: np.ndarray, iy: np.ndarray, seed: int, octave: int) -> np.ndarray:
    """Hash integer lattice coordinates to floats in [0, 1)."""
    mask = 0xFFFFFFFFFFFFFFFF
    seed_term = ((seed & mask) * int(_PRIME_SEED)) & mask
    octave_term = (octave * int(_PRIME_OCTAVE)) & mask
    key = (
        ix.astype(np.uint64) * _PRIME_X
        ^ iy.astype(np.uint64) * _PRIME_Y
        ^ np.uint64(seed_term ^ octave_term)
    ) & _MASK64
    return _mix64(key).astype(np.float64) / float(2 ** 64)


def _value_noise(width: int, height: int, cell: int, seed: int,
                 octave: int) -> np.ndarray:
    """Bilinear value noise on a lattice with the given cell size (pixels)."""
    xs = np.arange(width, dtype=np.float64) / cell
    ys = np.arange(height, dtype=np.float64) / cell
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    # smoothstep fade keeps the field C1-continuous across lattice lines
    fx = fx * fx * (3.0 - 2.0 * fx)
    fy = fy * fy * (3.0 - 2.0 * fy)

    gx = np.concatenate([x0, x0 + 1])
    gy = np.concatenate([y0, y0 + 1])
    ux, inv_x = np.unique(gx, return_inverse=True)
    uy, inv_y = np.unique(gy, return_inverse=True)
    table = _lattice01(
        np.repeat(ux[None, :], uy.size, axis=0),
        np.repeat(uy[:, None], ux.size, axis=1),
        seed,
        octave,
    )
    ix0, ix1 = inv_x[:width], inv_x[width:]
    iy0, iy1 = inv_y[:height], inv_y[height:]
    v00 = table[np.ix_(iy0, ix0)]
    v10 = table[np.ix_(iy0, ix1)]
    v01 = table[np.ix_(iy1, ix0)]
    v11 = table[np.ix_(iy1, ix1)]
    wx = fx[None, :]
    wy = fy[:, None]
    top = v00 * (1.0 - wx) + v10 * wx
    bottom = v01 * (1.0 - wx) + v11 * wx
    return top * (1.0 - wy) + bottom * wy


def _fbm(width: int, height: int, seed: int, ridged: bool) -> np.ndarray:
    """Three-octave fractal field normalized to [0, 1]."""
    total = np.zeros((height, width), dtype=np.float64)
    amp_sum = 0.0
    for octave in range(3):
        cell = max(4, 32 >> octave)
        amp = 0.5 ** octave
        v = _value_noise(width, height, cell, seed, octave)
        if ridged:
            v = 1.0 - np.abs(2.0 * v - 1.0)
        total += amp * v
        amp_sum += amp
    total /= amp_sum
    lo, hi = float(total.min()), float(total.max())
    if hi <= lo:
        raise ValueError("degenerate height field (no variation)")
    return (total - lo) / (hi - lo)


def _add_giant_clusters(chm: np.ndarray, seed: int) -> np.ndarray:
    """Raise a few compact clusters into the 80-110 m band, keeping the
    >= 80 m fraction within (0, 1%] of the scene."""
    height, width = chm.shape
    area = height * width
    sigma = 3.0
    px_per_cluster = 18.0  # ~pixels pushed >= 80 m by one cluster
    n_clusters = max(1, min(5, int(0.008 * area / px_per_cluster)))
    rng = np.random.default_rng((seed, 2))
    out = chm.copy()
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    margin = 4
    for _ in range(n_clusters):
        cr = float(rng.uniform(margin, height - margin))
        cc = float(rng.uniform(margin, width - margin))
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        bump = GIANT_TREE_CAP_M * np.exp(-d2 / (2.0 * sigma * sigma))
        out = np.maximum(out, bump)
        if float((out >= 80.0).mean()) > 0.01:
            out = np.minimum(out, np.where(bump > chm, chm, out))  # undo
            break
    if not (out >= 80.0).any():  # always exercise the tall-tree path
        out = np.maximum(out, GIANT_TREE_CAP_M * np.exp(
            -((rows - height / 2.0) ** 2 + (cols - width / 2.0) ** 2)
            / (2.0 * sigma * sigma)
        ))
    return out


def _band_stack(chm: np.ndarray, n_bands: int, sigma: float, seed: int) -> np.ndarray:
    """Fixed strictly increasing per-band response curves over the height
    field, optionally with additive Gaussian noise."""
    h = chm.astype(np.float64)
    bands = np.empty((n_bands, *chm.shape), dtype=np.float64)
    for c in range(n_bands):
        offset = 20.0 * (c + 1)
        slope = 0.8 + 0.4 * c
        curve = 15.0 if c % 2 else 5.0
        bands[c] = offset + slope * h + curve * (h / GIANT_TREE_CAP_M) ** 2 * GIANT_TREE_CAP_M
    if sigma > 0.0:
        rng = np.random.default_rng((seed, 5))
        bands += rng.normal(0.0, sigma, size=bands.shape)
    return bands.astype(np.float32)


@dataclass
class Scene:
    """Ground truth for the pipeline: a height field, correlated bands, and
    a block region map, all on one grid."""

    true_chm: RasterGrid
    bands: RasterGrid
    region_map: RasterGrid
    seed: int

    def __post_init__(self):
        chm = self.true_chm
        if chm.bands != 1:
            raise ValueError(f"height map must be single-band, got {chm.bands}")
        if chm.data.min() < 0.0 or chm.data.max() > MAX_CANOPY_HEIGHT:
            raise ValueError(
                f"height field spans [{chm.data.min()}, {chm.data.max()}], "
                f"outside [0, {MAX_CANOPY_HEIGHT}]"
            )
        for name, other in (("bands", self.bands), ("region_map", self.region_map)):
            if (other.height, other.width) != (chm.height, chm.width):
                raise ValueError(f"{name} shape differs from the height map")
            if other.transform != chm.transform:
                raise ValueError(f"{name} transform differs from the height map")
        if self.region_map.bands != 1:
            raise ValueError("region map must be single-band")


def gen_scene(seed: int, width: int, height: int, bands: int = 4,
              height_field: str = "smooth", band_model: str = "invertible",
              band_noise_sigma: float = 0.0, regions: tuple = (2, 2)) -> Scene:
    """Build a deterministic scene on a 10 m north-up grid.

    ``height_field``: smooth (rolling), ridged (crested), or patchy (smooth
    plus compact 80-110 m giants on < 1% of pixels). ``band_model``:
    "invertible" makes each band a strictly increasing noise-free function
    of height; "noisy" adds Gaussian noise of ``band_noise_sigma``.
    """
    if width < 16 or height < 16:
        raise ValueError(f"scene must be at least 16x16, got {width}x{height}")
    if bands < 1:
        raise ValueError(f"need at least one band, got {bands}")
    if height_field not in ("smooth", "ridged", "patchy"):
        raise ValueError(f"unknown height_field {height_field!r}")
    if band_model == "invertible":
        if band_noise_sigma != 0.0:
            raise ValueError("invertible band model cannot carry noise")
    elif band_model == "noisy":
        if not band_noise_sigma > 0.0:
            raise ValueError("noisy band model needs band_noise_sigma > 0")
    else:
        raise ValueError(f"unknown band_model {band_model!r}")
    rx, ry = int(regions[0]), int(regions[1])
    if rx < 1 or ry < 1:
        raise ValueError(f"region grid must be >= 1x1, got {regions}")

    field = _fbm(width, height, seed, ridged=(height_field == "ridged"))
    chm = field * CHM_BASE_MAX_M
    if height_field == "patchy":
        chm = _add_giant_clusters(chm, seed)
    chm32 = np.clip(chm.astype(np.float32), 0.0, MAX_CANOPY_HEIGHT)

    transform = AffineTransform(
        PIXEL_SIZE_M, 0.0, SCENE_ORIGIN[0], 0.0, -PIXEL_SIZE_M, SCENE_ORIGIN[1]
    )
    band_cube = _band_stack(chm32, bands, band_noise_sigma, seed)

    block_rows = np.minimum(np.arange(height) * ry // height, ry - 1)
    block_cols = np.minimum(np.arange(width) * rx // width, rx - 1)
    codes = (block_rows[:, None] * rx + block_cols[None, :]).astype(np.float32)

    return Scene(
        true_chm=RasterGrid(chm32[None], transform),
        bands=RasterGrid(band_cube, transform),
        region_map=RasterGrid(codes[None], transform),
        seed=seed,
    )


# --------------------------------------------------------------- footprints

GEDI_ALONG_PX = 6     # 60 m along-track spacing on a 10 m grid
GEDI_ACROSS_PX = 60   # 600 m between tracks
ICESAT_PAIR_SEP_PX = 9  # ~90 m between the beams of a pair
_MAX_PASSES = 512


def _pattern_pixels(pattern: str, width: int, height: int, pass_idx: int):
    if pattern == "gedi_like":
        row_off = pass_idx % GEDI_ALONG_PX
        col_off = (pass_idx // GEDI_ALONG_PX) % GEDI_ACROSS_PX
        return [
            (col, row)
            for col in range(col_off, width, GEDI_ACROSS_PX)
            for row in range(row_off, height, GEDI_ALONG_PX)
        ]
    if pattern == "icesat_like":
        col_off = pass_idx % max(1, width // 6)
        cols = []
        for i in range(3):
            center = (width * (2 * i + 1)) // 6 + col_off
            for c in (center - ICESAT_PAIR_SEP_PX // 2,
                      center + ICESAT_PAIR_SEP_PX - ICESAT_PAIR_SEP_PX // 2):
                if 0 <= c < width:
                    cols.append(c)
        return [(col, row) for col in cols for row in range(height)]
    raise ValueError(
        f"unknown pattern {pattern!r}; expected 'gedi_like' or 'icesat_like'"
    )


def sample_footprints(scene: Scene, pattern: str, n: int | None = None,
                      height_noise_sigma: float = 0.0, dropout: float = 0.0,
                      seed: int = 0, bad_quality_fraction: float = 0.0):
    """Sample footprint records from the scene's true height field.

    gedi_like lays parallel tracks (60 m along, 600 m across); icesat_like
    lays three beam pairs ~90 m apart. Heights are the true value at the
    footprint pixel plus optional Gaussian noise, clamped to the valid
    range. ``dropout`` removes a random fraction. When ``n`` is given, the
    pattern is re-laid at shifted offsets until n records exist."""
    if not (0.0 <= dropout <= 1.0):
        raise ValueError(f"dropout must be in [0, 1], got {dropout}")
    if height_noise_sigma < 0.0:
        raise ValueError(f"height_noise_sigma must be >= 0, got {height_noise_sigma}")
    if not (0.0 <= bad_quality_fraction <= 1.0):
        raise ValueError(
            f"bad_quality_fraction must be in [0, 1], got {bad_quality_fraction}"
        )
    if n is not None and n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    chm = scene.true_chm.data[0]
    transform = scene.true_chm.transform
    source = "GEDI" if pattern == "gedi_like" else "ICESAT2"
    rng = np.random.default_rng((seed, 3))
    records = []
    passes = _MAX_PASSES if n is not None else 1
    for pass_idx in range(passes):
        for col, row in _pattern_pixels(pattern, chm.shape[1], chm.shape[0], pass_idx):
            if dropout > 0.0 and rng.uniform() < dropout:
                continue
            h = float(chm[row, col])
            if height_noise_sigma > 0.0:
                h += float(rng.normal(0.0, height_noise_sigma))
            h = min(max(h, 0.0), MAX_CANOPY_HEIGHT)
            quality = 1
            if bad_quality_fraction > 0.0 and rng.uniform() < bad_quality_fraction:
                quality = 0
            wx, wy = transform.pixel_to_world(col + 0.5, row + 0.5)
            records.append(
                FootprintRecord(
                    x=float(wx), y=float(wy), canopy_height=h,
                    source=source, quality=quality,
                )
            )
        if n is not None and len(records) >= n:
            break
    if n is not None:
        if len(records) < n:
            raise ValueError(
                f"could only draw {len(records)} of the requested {n} footprints"
            )
        records = records[:n]
    if not records:
        raise ValueError("sampling produced zero footprints")
    return records


# ------------------------------------------------------------------ photons


def _clip_to_bounds(p0, p1, xmin, xmax, ymin, ymax):
    """Liang-Barsky segment/box clip; returns (t0, t1) or None."""
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x0 - xmin), (dx, xmax - x0),
        (-dy, y0 - ymin), (dy, ymax - y0),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    if t0 >= t1:
        return None
    return t0, t1


# signal photon elevation mixture: dense ground and canopy-surface layers
# plus a thin volume component, all within [0, local height]
_GROUND_FRAC = 0.36
_TOP_FRAC = 0.56
_GROUND_DEPTH_M = 2.0
_TOP_DEPTH_M = 3.0


def gen_photons(scene: Scene, track, photons_per_meter: float,
                noise_rate: float, seed: int = 0):
    """Simulate a photon-counting track over the scene.

    Signal photons fall between the ground and the local canopy height at
    the given linear density, concentrated near the ground and the canopy
    surface. Noise photons spread uniformly over an elevation window five
    times the scene's maximum height. Along-track positions are meters from
    where the track enters the scene."""
    if photons_per_meter < 0.0 or noise_rate < 0.0:
        raise ValueError("photon rates must be >= 0")
    (p0, p1) = track
    t = scene.true_chm.transform
    width, height = scene.true_chm.width, scene.true_chm.height
    xmin, xmax = sorted((t.c, t.c + t.a * width))
    ymin, ymax = sorted((t.f, t.f + t.e * height))
    seg_len = float(np.hypot(p1[0] - p0[0], p1[1] - p0[1]))
    if seg_len == 0.0:
        raise ValueError("track has zero length")
    clip = _clip_to_bounds(p0, p1, xmin, xmax, ymin, ymax)
    if clip is None:
        raise ValueError("track misses the scene")
    t0, t1 = clip
    length = (t1 - t0) * seg_len
    chm = scene.true_chm.data[0]
    rng = np.random.default_rng((seed, 4))

    photons = []
    n_signal = int(round(photons_per_meter * length))
    if n_signal:
        d = np.sort(rng.uniform(0.0, length, n_signal))
        frac = t0 + (d / length) * (t1 - t0)
        wx = p0[0] + frac * (p1[0] - p0[0])
        wy = p0[1] + frac * (p1[1] - p0[1])
        cols, rows = t.world_to_pixel(wx, wy)
        cols = np.clip(np.floor(cols).astype(int), 0, width - 1)
        rows = np.clip(np.floor(rows).astype(int), 0, height - 1)
        h = chm[rows, cols].astype(np.float64)
        u = rng.uniform(size=n_signal)
        r = rng.uniform(size=n_signal)
        z = np.where(
            u < _GROUND_FRAC,
            r * np.minimum(_GROUND_DEPTH_M, h),
            np.where(
                u < _GROUND_FRAC + _TOP_FRAC,
                h - r * np.minimum(_TOP_DEPTH_M, h),
                r * h,
            ),
        )
        photons.extend(
            PhotonEvent(along_track=float(a), elevation=float(e))
            for a, e in zip(d, z)
        )
    n_noise = int(round(noise_rate * length))
    if n_noise:
        cmax = float(chm.max())
        window = max(cmax, 1.0)
        d = rng.uniform(0.0, length, n_noise)
        z = rng.uniform(-2.0 * window, 3.0 * window, n_noise)
        photons.extend(
            PhotonEvent(along_track=float(a), elevation=float(e))
            for a, e in zip(d, z)
        )
    return photons
