import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerscope.segmentation import PipelineConfig, segment
from layerscope.thickness import (DEFAULT_PALETTE, TOTAL, ThicknessMap, find_fovea,
                                  layer_thickness, render_pseudocolor, sector_grid,
                                  sector_stats, total_thickness, write_ppm)
from layerscope.volume import DEFAULT_THICKNESS_UM, PhantomSpec, generate_phantom

from sector_oracle import brute_force_stats, pixel_sector


def test_flat_phantom_thickness(flat_phantom):
    vol, ref = flat_phantom
    # quantise the reference the way a voxel labelling would
    quantised = np.floor(ref) + 0.5
    maps = layer_thickness(quantised, vol.axial_scale)
    assert maps[1].layer == 2
    # each of the two bounding surfaces moves by at most half a voxel
    assert np.ptp(maps[1].values) == 0
    assert np.all(np.abs(maps[1].values - 40.0) <= vol.axial_scale + 1e-9)
    exact = layer_thickness(ref, vol.axial_scale)[1].values
    assert np.allclose(exact, 40.0, atol=1e-9)


def test_zero_thickness_column():
    s = np.tile(np.arange(12.0)[:, None, None], (1, 2, 2))
    s[4:, 1, 1] -= 1  # surface 5 coincides with surface 4 there
    maps = layer_thickness(s, 2.0)
    assert maps[3].values[1, 1] == 0.0
    assert maps[3].values[0, 0] == 2.0


def test_axial_scale_linearity(reference_phantom):
    _, ref = reference_phantom
    a = layer_thickness(ref, 3.0)
    b = layer_thickness(ref, 6.0)
    for m1, m2 in zip(a, b):
        assert np.array_equal(m2.values, 2 * m1.values)


def test_non_monotone_rejected():
    s = np.zeros((12, 1, 1))
    s[3] = -1
    with pytest.raises(ValueError):
        layer_thickness(s, 1.0)


def test_zero_total():
    maps = [ThicknessMap(k, np.zeros((3, 2)), 1.0, 1.0) for k in range(1, 12)]
    t = total_thickness(maps)
    assert t.layer == TOTAL and np.all(t.values == 0)


def test_total_telescopes(reference_phantom):
    vol, ref = reference_phantom
    maps = layer_thickness(ref, vol.axial_scale)
    total = total_thickness(maps).values
    assert np.allclose(total, (ref[-1] - ref[0]) * vol.axial_scale, rtol=1e-12, atol=1e-9)
    summed = np.zeros_like(total)
    for m in maps:
        summed = summed + m.values
    assert np.array_equal(total, summed)


def test_fovea_unique_minimum():
    m = np.full((128, 64), 10.0)
    m[64, 32] = 1.0
    assert find_fovea(m, smooth_radius=0) == (64, 32)


def test_fovea_tie_prefers_centre():
    m = np.full((9, 9), 10.0)
    m[0, 0] = 1.0
    m[4, 4] = 1.0
    assert find_fovea(m, smooth_radius=0) == (4, 4)


def test_fovea_on_pit_phantom():
    spec = PhantomSpec(dims=(64, 128, 16), pit_depth=40.0, pit_center=(25.0, 9.0), noise_sd=0.0)
    vol, _ = generate_phantom(spec)
    surfaces, _ = segment(vol, PipelineConfig(threads=1))
    rnfl = layer_thickness(surfaces.surfaces, vol.axial_scale)[0]
    fx, fz = find_fovea(rnfl, (2, 0))
    assert abs(fx - 25) <= 2 and abs(fz - 9) <= 2


def test_centre_is_sector_one():
    g = sector_grid((10, 10), (21, 21), lateral_scales=(100.0, 100.0))
    assert g.labels[10, 10] == 1


def test_one_mm_nasal_is_sector_three():
    g = sector_grid((30, 30), (61, 61), lateral_scales=(100.0, 100.0))
    assert g.labels[40, 30] == 3
    assert g.labels[20, 30] == 5
    assert g.labels[30, 40] == 2  # +z superior
    assert sector_grid((30, 30), (61, 61), lateral_scales=(100.0, 100.0), eye="left").labels[40, 30] == 5


def test_diagonal_goes_vertical():
    g = sector_grid((30, 30), (61, 61), lateral_scales=(100.0, 100.0))
    assert g.labels[38, 38] == 2
    assert g.labels[22, 22] == 4


def test_partition():
    g = sector_grid((20.5, 11), (41, 23), lateral_scales=(150.0, 270.0))
    dx = (np.arange(41)[:, None] - 20.5) * 150.0
    dz = (np.arange(23)[None, :] - 11) * 270.0
    inside = dx ** 2 + dz ** 2 <= 3000.0 ** 2
    assert np.all((g.labels > 0) == inside)
    assert set(np.unique(g.labels)) <= set(range(10))


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(3, 40), nz=st.integers(3, 40), seed=st.integers(0, 10**6))
def test_pixel_mirror_labels(nx, nz, seed):
    r = np.random.default_rng(seed)
    cx, cz = r.integers(0, nx), r.integers(0, nz)
    scales = (6000.0 / nx, 6000.0 / nz)
    right = sector_grid((cx, cz), (nx, nz), lateral_scales=scales, eye="right").labels
    left = sector_grid((nx - 1 - cx, cz), (nx, nz), lateral_scales=scales, eye="left").labels
    assert np.array_equal(left, right[::-1])


def test_constant_map_stats():
    g = sector_grid((32, 32), (65, 65))
    stats = sector_stats(np.full((65, 65), 300.0), g)
    for s in range(1, 10):
        assert stats[s].mean == 300.0 and stats[s].sd == 0.0 and stats[s].count > 0


def test_empty_sector_reported():
    g = sector_grid((0, 0), (3, 3), lateral_scales=(10.0, 10.0))
    stats = sector_stats(np.ones((3, 3)), g)
    assert stats[1].count == 9
    assert stats[7].count == 0 and stats[7].mean is None


@pytest.mark.parametrize("seed", range(5))
def test_stats_match_oracle(seed):
    r = np.random.default_rng(seed)
    nx, nz = r.integers(8, 120, size=2)
    values = r.normal(250, 30, size=(nx, nz))
    center = (int(r.integers(0, nx)), int(r.integers(0, nz)))
    scales = (6000.0 / nx, 6000.0 / nz)
    eye = "right" if seed % 2 else "left"
    g = sector_grid(center, (nx, nz), lateral_scales=scales, eye=eye)
    got = sector_stats(values, g)
    want = brute_force_stats(values, center, scales, (1000.0, 3000.0, 6000.0), eye)
    for s in range(1, 10):
        assert (got[s].mean, got[s].sd, got[s].count) == want[s]
    assert g.labels[center] == pixel_sector(*center, center, scales, (1000, 3000, 6000), eye)


def test_calibrated_phantom_fovea_total():
    nominal = np.asarray(DEFAULT_THICKNESS_UM)
    thick = tuple(nominal * 264.0 / nominal.sum())
    spec = PhantomSpec(dims=(64, 128, 8), thicknesses=thick, pit_depth=0.0, undulation=0.0)
    vol, ref = generate_phantom(spec)
    for surfaces, tol in ((ref, 1e-9), (segment(vol, PipelineConfig(threads=1))[0].surfaces,
                                         vol.axial_scale)):
        maps = layer_thickness(surfaces, vol.axial_scale, (vol.lateral_scale_x, vol.lateral_scale_z))
        total = total_thickness(maps)
        g = sector_grid((32, 4), total.shape, lateral_scales=(vol.lateral_scale_x, vol.lateral_scale_z))
        assert sector_stats(total, g)[1].mean == pytest.approx(264.0, abs=tol)


def test_palette_endpoints():
    m = np.array([[0.0, 5.0, 10.0]])
    img = render_pseudocolor(m, value_range=(0.0, 10.0))
    assert img.shape == (3, 1, 3)
    assert np.array_equal(img[0, 0], DEFAULT_PALETTE[0])
    assert np.array_equal(img[2, 0], DEFAULT_PALETTE[-1])
    assert DEFAULT_PALETTE[0].tolist() == [0, 0, 128]
    assert DEFAULT_PALETTE[-1].tolist() == [128, 0, 0]


def test_degenerate_range():
    with pytest.raises(ValueError):
        render_pseudocolor(np.ones((2, 2)))


def test_render_deterministic(tmp_path, rng):
    m = rng.random((20, 10)) * 300
    write_ppm(render_pseudocolor(m), tmp_path / "a.ppm")
    write_ppm(render_pseudocolor(m), tmp_path / "b.ppm")
    data = (tmp_path / "a.ppm").read_bytes()
    assert data == (tmp_path / "b.ppm").read_bytes()
    assert data.startswith(b"P6\n20 10\n255\n")
    assert len(data) == len(b"P6\n20 10\n255\n") + 20 * 10 * 3
    assert math.isfinite(m.sum())
