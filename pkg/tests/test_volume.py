import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerscope.volume import (
    DEFAULT_AXIAL_UM, PhantomSpec, Volume, VolumeFormatError, generate_phantom,
    read_surfaces_csv, read_volume, write_surfaces_csv, write_volume,
)


def test_round_trip_u16(tmp_path, rng):
    v = Volume(rng.integers(0, 65535, size=(5, 7, 3), dtype=np.uint16), 3.5, 20.0, 125.0)
    write_volume(v, tmp_path / "a.lsv")
    back = read_volume(tmp_path / "a.lsv")
    assert back == v
    assert back.data.dtype == v.data.dtype
    assert np.array_equal(back.data, v.data)


def test_round_trip_float_scales_full_precision(tmp_path):
    v = Volume(np.arange(24, dtype=float).reshape(2, 3, 4) / 7.0, 1 / 3, 0.1 + 0.2, np.pi)
    write_volume(v, tmp_path / "f.lsv")
    back = read_volume(tmp_path / "f.lsv")
    assert back.scales == v.scales
    assert np.array_equal(back.data, v.data)


def test_length_mismatch_rejected(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.uint16))
    p = tmp_path / "v.lsv"
    write_volume(v, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-2])  # 7 voxels
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.lsv"
    p.write_bytes(b"NOT A VOLUME\n")
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_empty_dims_rejected():
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 3, 3)))


def test_writes_are_byte_identical(tmp_path, rng):
    v = Volume(rng.integers(0, 1000, size=(4, 6, 2), dtype=np.uint16))
    write_volume(v, tmp_path / "1.lsv")
    write_volume(v, tmp_path / "2.lsv")
    assert (tmp_path / "1.lsv").read_bytes() == (tmp_path / "2.lsv").read_bytes()


@pytest.mark.slow
def test_large_volume_round_trip(tmp_path):
    data = (np.arange(512 * 496 * 19, dtype=np.uint32) % 65521).astype(np.uint16).reshape(512, 496, 19)
    v = Volume(data)
    write_volume(v, tmp_path / "big.lsv")
    assert read_volume(tmp_path / "big.lsv") == v


def test_phantom_round_trip(tmp_path, reference_phantom):
    vol, _ = reference_phantom
    write_volume(vol, tmp_path / "p.lsv")
    back = read_volume(tmp_path / "p.lsv")
    assert back == vol
    assert back.scales == (6000.0 / 128, DEFAULT_AXIAL_UM, 6000.0 / 16)


def test_surfaces_csv_round_trip(tmp_path, reference_phantom):
    _, s = reference_phantom
    write_surfaces_csv(s, tmp_path / "s.csv")
    assert np.array_equal(read_surfaces_csv(tmp_path / "s.csv"), s)


def test_flat_phantom_piecewise_constant(flat_phantom):
    vol, surfaces = flat_phantom
    # every surface is a horizontal plane
    assert np.all(surfaces == surfaces[:, :1, :1])
    # every column carries the same profile
    assert np.all(vol.data == vol.data[:1, :, :1])
    levels = np.unique(vol.data)
    assert len(levels) == 13


def test_phantom_determinism():
    spec = PhantomSpec(dims=(16, 96, 3), noise_sd=3000.0, rng_seed=4)
    a, sa = generate_phantom(spec)
    b, sb = generate_phantom(spec)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(sa, sb)


def test_pit_minimum_at_centre():
    spec = PhantomSpec(dims=(64, 128, 9), pit_depth=40.0, undulation=0.0)
    _, s = generate_phantom(spec)
    t1 = s[1] - s[0]
    assert np.unravel_index(np.argmin(t1), t1.shape) == (32, 4)


def test_too_thick_for_volume():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(dims=(8, 40, 2)))


@settings(max_examples=25, deadline=None)
@given(
    depth=st.floats(0, 60),
    undulation=st.floats(0, 8),
    seed=st.integers(0, 2**16),
    cx=st.floats(0, 31),
)
def test_phantom_surfaces_monotone(depth, undulation, seed, cx):
    spec = PhantomSpec(dims=(32, 128, 4), pit_depth=depth, undulation=undulation,
                       pit_center=(cx, 1.5), noise_sd=500.0, rng_seed=seed)
    _, s = generate_phantom(spec)
    assert np.all(np.diff(s, axis=0) >= 0)
    assert s.shape == (12, 32, 4)
