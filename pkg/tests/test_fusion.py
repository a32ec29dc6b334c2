"""Harmonization, footprint rasterization, and training-sample assembly."""

import numpy as np
import pytest

from canopyfuse import fusion, geo
from canopyfuse.fusion import Sample, SparseLabelGrid
from canopyfuse.geo import AffineTransform, RasterGrid
from canopyfuse.lidar import FootprintRecord

NORTH_UP = AffineTransform(10.0, 0.0, 500000.0, 0.0, -10.0, 4200000.0)


def rec(x, y, h, source="GEDI", quality=1):
    return FootprintRecord(x=x, y=y, canopy_height=h, source=source, quality=quality)


def template(w=4, h=4, bands=1):
    return RasterGrid(np.zeros((bands, h, w), dtype=np.float32), NORTH_UP)


# ------------------------------------------------------------- harmonization


def test_harmonize_hand_computed():
    # src {0, 10}: mean 5, population std 5. Mapped onto (20, 10): {10, 30}.
    out = fusion.harmonize([0.0, 10.0], ref_mean=20.0, ref_std=10.0)
    assert np.allclose(out, [10.0, 30.0], atol=1e-12)


def test_harmonize_moments_property():
    rng = np.random.default_rng(17)
    for _ in range(25):
        n = int(rng.integers(2, 500))
        heights = rng.uniform(0, 80, n)
        if np.ptp(heights) == 0:
            heights[0] += 1.0
        ref_mean = float(rng.uniform(5, 60))
        ref_std = float(rng.uniform(0.5, 20))
        out = np.asarray(fusion.harmonize(heights, ref_mean, ref_std))
        assert abs(out.mean() - ref_mean) < 1e-9
        assert abs(out.std() - ref_std) < 1e-9


def test_harmonize_degenerate_inputs():
    with pytest.raises(ValueError):
        fusion.harmonize([5.0], ref_mean=10.0, ref_std=1.0)
    with pytest.raises(ValueError):
        fusion.harmonize([5.0, 5.0, 5.0], ref_mean=10.0, ref_std=1.0)
    with pytest.raises(ValueError):
        fusion.harmonize([0.0, 10.0], ref_mean=10.0, ref_std=0.0)


def test_harmonize_records_maps_icesat_onto_gedi():
    gedi = [rec(float(i), 0.0, h, "GEDI") for i, h in enumerate((10.0, 20.0, 30.0))]
    ice = [rec(float(i), 1.0, h, "ICESAT2") for i, h in enumerate((0.0, 5.0, 10.0))]
    out, info = fusion.harmonize_records(gedi + ice)
    out_gedi = [r for r in out if r.source == "GEDI"]
    out_ice = [r for r in out if r.source == "ICESAT2"]
    assert [r.canopy_height for r in out_gedi] == [10.0, 20.0, 30.0]
    # ICESAT2 moments (5, std) mapped onto GEDI's (20, std_g).
    ice_h = np.array([r.canopy_height for r in out_ice])
    assert abs(ice_h.mean() - 20.0) < 1e-9
    gedi_std = np.array([10.0, 20.0, 30.0]).std()
    assert abs(ice_h.std() - gedi_std) < 1e-9
    assert info["n_transformed"] == 3
    assert info["reference"] == "GEDI"


def test_harmonize_records_noop_without_secondary():
    gedi = [rec(float(i), 0.0, float(i), "GEDI") for i in range(5)]
    out, info = fusion.harmonize_records(gedi)
    assert out == gedi
    assert info["n_transformed"] == 0


def test_harmonize_records_clamps_and_counts():
    gedi = [rec(0.0, 0.0, 100.0), rec(1.0, 0.0, 140.0)]
    ice = [rec(0.0, 1.0, 0.0, "ICESAT2"), rec(1.0, 1.0, 40.0, "ICESAT2")]
    # ICESAT2 z-scores are +/-1 -> mapped to 120 +/- 20 = {100, 140}: fine.
    out, info = fusion.harmonize_records(gedi + ice)
    assert info["n_clamped"] == 0
    # Wide reference + |z| > 1 secondary values overshoot [0, 150]: clamped.
    gedi2 = [rec(0.0, 0.0, 10.0), rec(1.0, 0.0, 150.0)]
    ice2 = ice + [rec(2.0, 1.0, 20.0, "ICESAT2")]  # z = {-1.22, 1.22, 0}
    out2, info2 = fusion.harmonize_records(gedi2 + ice2)
    clamped = [r for r in out2 if r.source == "ICESAT2"]
    assert all(0.0 <= r.canopy_height <= 150.0 for r in clamped)
    assert info2["n_clamped"] == 2


# -------------------------------------------------------------- rasterization


def test_rasterize_hand_placed():
    t = template(4, 4)
    records = [
        rec(500005.0, 4199995.0, 10.0),          # pixel (0, 0)
        rec(500007.0, 4199993.0, 20.0),          # pixel (0, 0) again
        rec(500015.0, 4199985.0, 30.0),          # pixel (1, 1)
        rec(499000.0, 4199985.0, 5.0),           # west of the grid: dropped
    ]
    grid, summary = fusion.rasterize_footprints(records, t)
    assert grid.counts[0, 0] == 2
    assert grid.counts[1, 1] == 1
    assert grid.counts.sum() == 3
    assert grid.labels.data[0, 0, 0] == pytest.approx(15.0)
    assert grid.labels.data[0, 1, 1] == pytest.approx(30.0)
    assert grid.labels.data[0, 2, 2] == np.float32(t.nodata)
    assert summary.n_out_of_bounds == 1
    assert summary.n_in_bounds == 3
    assert summary.per_source["GEDI"] == 3


def test_rasterize_boundary_pixels():
    t = template(2, 2)
    # x = 500010 -> col exactly 1.0 -> pixel 1; y = 4199980 -> row 2 -> OOB.
    grid, summary = fusion.rasterize_footprints(
        [rec(500010.0, 4199995.0, 7.0), rec(500005.0, 4199980.0, 9.0)], t
    )
    assert grid.counts[0, 1] == 1
    assert summary.n_out_of_bounds == 1


def test_rasterize_mean_oracle_property():
    rng = np.random.default_rng(23)
    t = template(8, 6)
    records = [
        rec(
            float(rng.uniform(499990, 500090)),   # some fall outside
            float(rng.uniform(4199935, 4200005)),
            float(rng.uniform(0, 60)),
        )
        for _ in range(300)
    ]
    grid, summary = fusion.rasterize_footprints(records, t)
    # Brute-force oracle: group by containing pixel, mean per group.
    groups: dict[tuple[int, int], list[float]] = {}
    oob = 0
    for r in records:
        col, row = NORTH_UP.world_to_pixel(r.x, r.y)
        ci, ri = int(np.floor(col)), int(np.floor(row))
        if 0 <= ci < 8 and 0 <= ri < 6:
            groups.setdefault((ci, ri), []).append(r.canopy_height)
        else:
            oob += 1
    assert summary.n_out_of_bounds == oob
    for (ci, ri), hs in groups.items():
        assert grid.counts[ri, ci] == len(hs)
        assert grid.labels.data[0, ri, ci] == pytest.approx(
            np.mean(hs), rel=1e-6
        )
    assert grid.counts.sum() == 300 - oob


def test_sparse_label_grid_invariant():
    t = template(2, 2)
    labels = RasterGrid(
        np.array([[[5.0, -9999.0], [-9999.0, -9999.0]]], dtype=np.float32), NORTH_UP
    )
    counts = np.array([[1, 0], [0, 0]], dtype=np.int64)
    SparseLabelGrid(labels=labels, counts=counts)  # consistent: fine
    bad_counts = np.array([[0, 0], [0, 1]], dtype=np.int64)
    with pytest.raises(ValueError):
        SparseLabelGrid(labels=labels, counts=bad_counts)


# ------------------------------------------------------------------- samples


def _bands_and_labels(w=6, h=6, label_pixels=((1, 1, 12.0), (4, 4, 33.0))):
    rng = np.random.default_rng(31)
    bands = RasterGrid(
        rng.normal(0, 1, size=(2, h, w)).astype(np.float32), NORTH_UP
    )
    lab = np.full((1, h, w), -9999.0, dtype=np.float32)
    counts = np.zeros((h, w), dtype=np.int64)
    for col, row, val in label_pixels:
        lab[0, row, col] = val
        counts[row, col] = 1
    labels = SparseLabelGrid(
        labels=RasterGrid(lab, NORTH_UP), counts=counts
    )
    return bands, labels


def test_build_samples_hand_case():
    bands, labels = _bands_and_labels()
    samples = fusion.build_samples(bands, labels, patch=3, step=3)
    # Origins (0,0),(3,0),(0,3),(3,3); only (0,0) and (3,3) contain labels.
    assert len(samples) == 2
    s0, s1 = samples
    assert s0.origin == (0, 0) and s1.origin == (3, 3)
    assert s0.patch.shape == (2, 3, 3)
    assert s0.label_mask[1, 1] and s0.label_mask.sum() == 1
    assert s0.label_values[1, 1] == pytest.approx(12.0)
    assert s1.label_values[1, 1] == pytest.approx(33.0)
    # off-mask labels are zeroed
    assert s0.label_values[0, 0] == 0.0
    # patches copy the underlying band window
    assert np.array_equal(s0.patch, bands.data[:, 0:3, 0:3])
    assert np.array_equal(s1.patch, bands.data[:, 3:6, 3:6])
    assert s0.sample_id != s1.sample_id


def test_build_samples_every_sample_has_a_label():
    rng = np.random.default_rng(41)
    bands = RasterGrid(rng.normal(size=(1, 30, 30)).astype(np.float32), NORTH_UP)
    lab = np.full((1, 30, 30), -9999.0, dtype=np.float32)
    counts = np.zeros((30, 30), dtype=np.int64)
    pick = rng.random((30, 30)) < 0.05
    lab[0, pick] = rng.uniform(0, 50, int(pick.sum()))
    counts[pick] = 1
    labels = SparseLabelGrid(labels=RasterGrid(lab, NORTH_UP), counts=counts)
    samples = fusion.build_samples(bands, labels, patch=7, step=4)
    assert samples, "some patch must contain a label"
    for s in samples:
        assert s.label_mask.any()
        assert np.all(s.label_values[~s.label_mask] == 0.0)
        c0, r0 = s.origin
        assert np.array_equal(s.label_mask, counts[r0 : r0 + 7, c0 : c0 + 7] > 0)


def test_build_samples_grid_mismatch():
    bands, labels = _bands_and_labels()
    other = AffineTransform(20.0, 0.0, 0.0, 0.0, -20.0, 0.0)
    shifted = SparseLabelGrid(
        labels=RasterGrid(labels.labels.data.copy(), other), counts=labels.counts
    )
    with pytest.raises(ValueError, match="transform"):
        fusion.build_samples(bands, shifted, patch=3, step=3)


def test_build_samples_with_regions():
    bands, labels = _bands_and_labels()
    region_data = np.zeros((1, 6, 6), dtype=np.float32)
    region_data[0, :, 3:] = 1.0  # east half is region 1
    regions = RasterGrid(region_data, NORTH_UP)
    samples = fusion.build_samples(bands, labels, patch=3, step=3, region_map=regions)
    by_origin = {s.origin: s.region for s in samples}
    assert by_origin[(0, 0)] == "R0"
    assert by_origin[(3, 3)] == "R1"


def test_sample_requires_masked_pixel():
    with pytest.raises(ValueError):
        Sample(
            patch=np.zeros((1, 3, 3), dtype=np.float32),
            label_values=np.zeros((3, 3), dtype=np.float32),
            label_mask=np.zeros((3, 3), dtype=bool),
            origin=(0, 0),
            sample_id=0,
        )
