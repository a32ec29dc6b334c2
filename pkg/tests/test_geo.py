"""Raster grid, affine mapping, stats, tiling, and CHMR format tests."""

import math
import struct

import numpy as np
import pytest

from canopyfuse import geo
from canopyfuse.geo import (
    AffineTransform,
    BadMagicError,
    ChannelStats,
    DegenerateBandError,
    DimensionOverflowError,
    RasterError,
    RasterFormatError,
    RasterGrid,
    TruncatedPayloadError,
    VersionMismatchError,
)

NORTH_UP = AffineTransform(10.0, 0.0, 500000.0, 0.0, -10.0, 4200000.0)


def make_grid(data, transform=NORTH_UP, nodata=-9999.0):
    return RasterGrid(np.asarray(data, dtype=np.float32), transform, nodata)


# ---------------------------------------------------------------- transforms


def test_pixel_to_world_hand_computed():
    assert NORTH_UP.pixel_to_world(2.0, 3.0) == (500020.0, 4199970.0)
    assert NORTH_UP.pixel_to_world(0.0, 0.0) == (500000.0, 4200000.0)


def test_world_to_pixel_hand_computed():
    # x = 500025 lies 2.5 pixels east of the origin; containing pixel is 2.
    col, row = NORTH_UP.world_to_pixel(500025.0, 4199975.0)
    assert col == pytest.approx(2.5, abs=1e-12)
    assert row == pytest.approx(2.5, abs=1e-12)
    assert (math.floor(col), math.floor(row)) == (2, 2)


def test_singular_transform_rejected():
    with pytest.raises(ValueError, match="singular"):
        AffineTransform(1.0, 2.0, 0.0, 2.0, 4.0, 0.0)  # det = 0
    with pytest.raises(ValueError, match="singular"):
        AffineTransform(1e-7, 0.0, 0.0, 0.0, 1e-7, 0.0)  # |det| = 1e-14


def test_non_finite_transform_rejected():
    with pytest.raises(ValueError):
        AffineTransform(float("nan"), 0.0, 0.0, 0.0, 1.0, 0.0)


def test_transform_round_trip_property():
    rng = np.random.default_rng(20260825)
    for _ in range(200):
        # Well-conditioned random affines: diagonal-dominant linear part.
        a = rng.uniform(1.0, 50.0) * rng.choice([-1.0, 1.0])
        e = rng.uniform(1.0, 50.0) * rng.choice([-1.0, 1.0])
        b, d = rng.uniform(-0.5, 0.5, size=2)
        c, f = rng.uniform(-1e6, 1e6, size=2)
        t = AffineTransform(a, b, c, d, e, f)
        col, row = rng.uniform(-1e4, 1e4, size=2)
        x, y = t.pixel_to_world(col, row)
        col2, row2 = t.world_to_pixel(x, y)
        assert abs(col2 - col) < 1e-9 * max(1.0, abs(col))
        assert abs(row2 - row) < 1e-9 * max(1.0, abs(row))


def test_transform_vectorized_matches_scalar():
    cols = np.array([0.0, 1.5, 7.0])
    rows = np.array([2.0, 0.25, -3.0])
    xs, ys = NORTH_UP.pixel_to_world(cols, rows)
    for i in range(3):
        x, y = NORTH_UP.pixel_to_world(cols[i], rows[i])
        assert xs[i] == x and ys[i] == y


# ---------------------------------------------------------------- RasterGrid


def test_raster_basic_properties():
    r = make_grid(np.zeros((3, 4, 5)))
    assert (r.bands, r.height, r.width) == (3, 4, 5)
    assert r.data.dtype == np.float32


def test_raster_2d_promoted_to_single_band():
    r = make_grid(np.ones((4, 5)))
    assert (r.bands, r.height, r.width) == (1, 4, 5)


def test_raster_rejects_nan():
    data = np.zeros((1, 2, 2), dtype=np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(RasterError, match="non-finite"):
        make_grid(data)


def test_raster_rejects_empty_dims():
    with pytest.raises(RasterError):
        make_grid(np.zeros((1, 0, 5)))


def test_valid_masks():
    data = np.array([[[1.0, -9999.0], [2.0, 3.0]], [[5.0, 6.0], [-9999.0, 7.0]]])
    r = make_grid(data)
    vm = r.valid_mask()
    assert vm.tolist() == [[[True, False], [True, True]], [[True, True], [False, True]]]
    assert r.all_bands_valid().tolist() == [[True, False], [False, True]]


def test_select_bands():
    data = np.stack([np.full((2, 2), v) for v in (0.0, 1.0, 2.0)])
    r = make_grid(data)
    sub = r.select_bands([2, 0])
    assert sub.bands == 2
    assert float(sub.data[0, 0, 0]) == 2.0
    assert float(sub.data[1, 0, 0]) == 0.0
    with pytest.raises(RasterError):
        r.select_bands([3])


# --------------------------------------------------------------- statistics


def test_channel_stats_hand_computed():
    # {1, 2, 3}: mean 2, population std sqrt(2/3).
    r = make_grid(np.array([[[1.0, 2.0, 3.0]]]))
    s = geo.compute_channel_stats(r)
    assert s.mean[0] == pytest.approx(2.0, abs=1e-12)
    assert s.std[0] == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-12)


def test_channel_stats_ignores_nodata():
    r = make_grid(np.array([[[1.0, -9999.0], [2.0, 3.0]]]))
    s = geo.compute_channel_stats(r)
    assert s.mean[0] == pytest.approx(2.0, abs=1e-12)


def test_channel_stats_zero_variance_names_band():
    data = np.stack([np.arange(4.0).reshape(2, 2), np.full((2, 2), 7.0)])
    r = make_grid(data)
    with pytest.raises(DegenerateBandError, match="band 1"):
        geo.compute_channel_stats(r)


def test_channel_stats_too_few_pixels():
    r = make_grid(np.array([[[5.0, -9999.0], [-9999.0, -9999.0]]]))
    with pytest.raises(DegenerateBandError, match="band 0"):
        geo.compute_channel_stats(r)


def test_channel_stats_with_mask():
    r = make_grid(np.array([[[1.0, 2.0], [100.0, 200.0]]]))
    mask = np.array([[True, True], [False, False]])
    s = geo.compute_channel_stats(r, mask=mask)
    assert s.mean[0] == pytest.approx(1.5, abs=1e-12)


def test_channel_stats_validation():
    with pytest.raises(ValueError):
        ChannelStats(mean=(0.0,), std=(0.0,))
    with pytest.raises(ValueError):
        ChannelStats(mean=(0.0, 1.0), std=(1.0,))


def test_normalize_round_trip_stats():
    rng = np.random.default_rng(7)
    data = rng.normal(40.0, 12.0, size=(3, 32, 33)).astype(np.float32)
    data[0, :5, :5] = -9999.0
    r = make_grid(data)
    s = geo.compute_channel_stats(r)
    z = geo.normalize(r, s)
    zs = z.valid_mask()
    for b in range(3):
        vals = z.data[b][zs[b]].astype(np.float64)
        assert abs(vals.mean()) < 1e-6
        assert abs(vals.std() - 1.0) < 1e-6
    # nodata cells pass through untouched
    assert np.all(z.data[0, :5, :5] == np.float32(-9999.0))


def test_normalize_band_mismatch():
    r = make_grid(np.zeros((2, 3, 3)) + np.arange(9.0).reshape(3, 3))
    s = ChannelStats(mean=(0.0,), std=(1.0,))
    with pytest.raises(ValueError, match="bands"):
        geo.normalize(r, s)


# ------------------------------------------------------------------- tiling


def test_tile_patches_hand_enumerated():
    r = make_grid(np.zeros((1, 20, 20)))
    origins = geo.tile_patches(r, patch=15, step=4)
    expected = [(c, rr) for rr in (0, 4, 5) for c in (0, 4, 5)]
    assert origins == expected


def test_tile_patches_exact_fit():
    r = make_grid(np.zeros((1, 16, 16)))
    assert geo.tile_patches(r, patch=8, step=8) == [
        (0, 0), (8, 0), (0, 8), (8, 8)
    ]


def test_tile_patches_single_window():
    r = make_grid(np.zeros((1, 15, 15)))
    assert geo.tile_patches(r, patch=15, step=4) == [(0, 0)]


def test_tile_patches_cover_property():
    rng = np.random.default_rng(11)
    for _ in range(50):
        h = int(rng.integers(5, 40))
        w = int(rng.integers(5, 40))
        patch = int(rng.integers(2, min(h, w) + 1))
        step = int(rng.integers(1, patch + 1))
        r = make_grid(np.zeros((1, h, w)))
        covered = np.zeros((h, w), dtype=bool)
        for c, rr in geo.tile_patches(r, patch, step):
            assert 0 <= c <= w - patch and 0 <= rr <= h - patch
            covered[rr : rr + patch, c : c + patch] = True
        assert covered.all(), "step <= patch must cover every pixel"


def test_tile_patches_rejects_oversized_patch():
    r = make_grid(np.zeros((1, 10, 10)))
    with pytest.raises(ValueError, match="patch"):
        geo.tile_patches(r, patch=11, step=1)


# ------------------------------------------------------------------- CHMR IO


def test_chmr_round_trip_bit_identical(tmp_path):
    data = np.array([[[0.0, 1.5], [-2.25, -9999.0]]], dtype=np.float32)
    r = make_grid(data)
    p1 = tmp_path / "a.chmr"
    p2 = tmp_path / "b.chmr"
    geo.write_raster(r, str(p1))
    r2 = geo.read_raster(str(p1))
    assert r.equals(r2)
    geo.write_raster(r2, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_chmr_round_trip_property(tmp_path):
    rng = np.random.default_rng(99)
    for i in range(20):
        bands = int(rng.integers(1, 4))
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        data = rng.normal(0, 100, size=(bands, h, w)).astype(np.float32)
        data[rng.random(size=data.shape) < 0.2] = -9999.0
        r = make_grid(data)
        path = tmp_path / f"r{i}.chmr"
        geo.write_raster(r, str(path))
        assert geo.read_raster(str(path)).equals(r)


def test_chmr_header_layout():
    r = make_grid(np.zeros((1, 2, 3)) + np.arange(6.0).reshape(2, 3))
    blob = geo.raster_to_bytes(r)
    assert blob[:4] == b"CHMR"
    version, width, height, bands = struct.unpack("<IIII", blob[4:20])
    assert (version, width, height, bands) == (1, 3, 2, 1)
    affine = struct.unpack("<6d", blob[20:68])
    assert affine == NORTH_UP.to_tuple()
    (nodata,) = struct.unpack("<f", blob[68:72])
    assert nodata == -9999.0
    assert len(blob) == 72 + 4 * 6
    # band-major row-major float32 payload
    vals = np.frombuffer(blob, dtype="<f4", offset=72)
    assert vals.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_chmr_bad_magic():
    with pytest.raises(BadMagicError):
        geo.raster_from_bytes(b"NOPE" + b"\x00" * 100)


def test_chmr_bad_version():
    r = make_grid(np.zeros((1, 2, 2)) + [[1.0, 2.0], [3.0, 4.0]])
    blob = bytearray(geo.raster_to_bytes(r))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        geo.raster_from_bytes(bytes(blob))


def test_chmr_truncated():
    r = make_grid(np.zeros((1, 4, 4)) + np.arange(16.0).reshape(4, 4))
    blob = geo.raster_to_bytes(r)
    with pytest.raises(TruncatedPayloadError):
        geo.raster_from_bytes(blob[:-5])
    with pytest.raises(TruncatedPayloadError):
        geo.raster_from_bytes(blob[:10])
    with pytest.raises(TruncatedPayloadError):
        geo.raster_from_bytes(b"CH")


def test_chmr_dimension_overflow():
    r = make_grid(np.zeros((1, 2, 2)) + [[1.0, 2.0], [3.0, 4.0]])
    blob = bytearray(geo.raster_to_bytes(r))
    blob[8:16] = struct.pack("<II", 2 ** 20, 2 ** 20)  # 2^40 * bands cells
    with pytest.raises(DimensionOverflowError):
        geo.raster_from_bytes(bytes(blob))


def test_chmr_trailing_bytes_rejected():
    r = make_grid(np.zeros((1, 2, 2)) + [[1.0, 2.0], [3.0, 4.0]])
    blob = geo.raster_to_bytes(r) + b"\x00\x00"
    with pytest.raises(RasterFormatError, match="trailing"):
        geo.raster_from_bytes(blob)


def test_chmr_rejects_nan_payload():
    r = make_grid(np.zeros((1, 1, 2)) + [[1.0, 2.0]])
    blob = bytearray(geo.raster_to_bytes(r))
    blob[72:76] = struct.pack("<f", float("nan"))
    with pytest.raises(RasterError):
        geo.raster_from_bytes(bytes(blob))
