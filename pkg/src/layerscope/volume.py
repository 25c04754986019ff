"""Volume container, raw file I/O and synthetic layered phantoms.

Array convention: ``Volume.data`` has shape ``(nx, ny, nz)`` where x is the
lateral A-scan position, y is depth (axial) and z is the B-scan index.
Surfaces are stored as ``(n_surfaces, nx, nz)`` arrays of fractional depth in
voxels; a voxel at integer depth ``y`` belongs to layer ``k`` when
``surface[k-1] <= y < surface[k]``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "LAYERSCOPE-VOLUME"
FORMAT_VERSION = 1
N_LAYERS = 11
N_SURFACES = N_LAYERS + 1
SCAN_WIDTH_UM = 6000.0
DEFAULT_AXIAL_UM = 3.87

LAYER_NAMES = (
    "NFL", "GCL", "IPL", "INL", "OPL", "ONL", "ISL", "CL", "OSL", "VM", "RPE",
)

_DTYPES = {"u16": np.dtype("<u2"), "f64": np.dtype("<f8")}


class VolumeFormatError(ValueError):
    """Raised when a volume file is malformed or inconsistent."""


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    axial_scale: float = DEFAULT_AXIAL_UM
    lateral_scale_x: float | None = None
    lateral_scale_z: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3-D with all dims >= 1, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        nx, _, nz = data.shape
        if self.lateral_scale_x is None:
            object.__setattr__(self, "lateral_scale_x", SCAN_WIDTH_UM / nx)
        if self.lateral_scale_z is None:
            object.__setattr__(self, "lateral_scale_z", SCAN_WIDTH_UM / nz)
        for name in ("axial_scale", "lateral_scale_x", "lateral_scale_z"):
            value = float(getattr(self, name))
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def scales(self) -> tuple[float, float, float]:
        """(x, y, z) voxel pitch in micrometres."""
        return (self.lateral_scale_x, self.axial_scale, self.lateral_scale_z)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.scales == other.scales
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def _format_float(value: float) -> str:
    return repr(float(value))


def write_volume(volume: Volume, path) -> None:
    """Write ``volume`` as a text header followed by raw little-endian samples.

    Samples are ordered y-fastest, then x, then z.
    """
    data = volume.data
    if data.dtype == np.uint16:
        tag = "u16"
    elif data.dtype.kind == "f":
        tag = "f64"
    else:
        raise ValueError(f"unsupported sample type {data.dtype}; expected uint16 or float")
    nx, ny, nz = volume.dims
    header = "\n".join([
        f"{MAGIC} {FORMAT_VERSION}",
        f"dims={nx}x{ny}x{nz}",
        f"axial_um={_format_float(volume.axial_scale)}",
        f"lateral_x_um={_format_float(volume.lateral_scale_x)}",
        f"lateral_z_um={_format_float(volume.lateral_scale_z)}",
        f"dtype={tag}",
        "",
        "",
    ])
    raw = np.ascontiguousarray(data.transpose(2, 0, 1), dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(raw)


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume file not found: {path}")
    blob = path.read_bytes()
    split = blob.find(b"\n\n")
    if split < 0:
        raise VolumeFormatError("header terminator (blank line) not found")
    try:
        lines = blob[:split].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise VolumeFormatError("header is not ASCII") from exc
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise VolumeFormatError(f"bad magic line {lines[0]!r}")
    if magic[1] != str(FORMAT_VERSION):
        raise VolumeFormatError(f"unsupported format version {magic[1]}")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    missing = {"dims", "axial_um", "lateral_x_um", "lateral_z_um", "dtype"} - fields.keys()
    if missing:
        raise VolumeFormatError(f"header missing fields: {sorted(missing)}")
    try:
        dims = tuple(int(d) for d in fields["dims"].split("x"))
        scales = [float(fields[k]) for k in ("axial_um", "lateral_x_um", "lateral_z_um")]
    except ValueError as exc:
        raise VolumeFormatError(f"unparseable header value: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"bad dims {fields['dims']!r}")
    if fields["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {fields['dtype']!r}")
    dtype = _DTYPES[fields["dtype"]]
    raw = blob[split + 2:]
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"data length mismatch: header declares {nx}x{ny}x{nz} "
            f"({expected} bytes), file holds {len(raw)} bytes"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(nz, nx, ny).transpose(1, 2, 0)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    return Volume(arr, axial_scale=scales[0], lateral_scale_x=scales[1], lateral_scale_z=scales[2])


# -- surfaces --------------------------------------------------------------


def check_surfaces(surfaces: np.ndarray, ny: int | None = None) -> None:
    surfaces = np.asarray(surfaces)
    if surfaces.ndim != 3:
        raise ValueError("surfaces must have shape (n_surfaces, nx, nz)")
    if np.any(np.diff(surfaces, axis=0) < 0):
        raise ValueError("surfaces are not monotone in depth")
    if ny is not None and (surfaces.min() < 0 or surfaces.max() >= ny):
        raise ValueError(f"surface depths outside [0, {ny})")


def write_surfaces_csv(surfaces: np.ndarray, path) -> None:
    """CSV with columns ``x,z,s1..sN``; rows ordered z-major then x."""
    surfaces = np.asarray(surfaces, dtype=float)
    n, nx, nz = surfaces.shape
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "z"] + [f"s{k + 1}" for k in range(n)])
    for z in range(nz):
        for x in range(nx):
            writer.writerow([x, z] + [repr(float(v)) for v in surfaces[:, x, z]])
    Path(path).write_text(buf.getvalue(), encoding="ascii")


def read_surfaces_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise VolumeFormatError("empty surfaces file")
    header = rows[0]
    if header[:2] != ["x", "z"] or len(header) < 3:
        raise VolumeFormatError(f"bad surfaces header {header}")
    n = len(header) - 2
    body = rows[1:]
    xs = [int(r[0]) for r in body]
    zs = [int(r[1]) for r in body]
    nx, nz = max(xs) + 1, max(zs) + 1
    if len(body) != nx * nz:
        raise VolumeFormatError("surfaces file does not cover a full grid")
    out = np.full((n, nx, nz), np.nan)
    for x, z, row in zip(xs, zs, body):
        if len(row) != n + 2:
            raise VolumeFormatError("ragged surfaces row")
        out[:, x, z] = [float(v) for v in row[2:]]
    return out


# -- phantom ---------------------------------------------------------------

# Alternating bright/dark bands, loosely following OCT reflectivity.
DEFAULT_INTENSITIES = (
    50000, 22000, 44000, 14000, 38000, 17000, 36000, 58000, 16000, 40000, 62000,
)
# Nominal thickness per layer in micrometres.
DEFAULT_THICKNESS_UM = (
    28.0, 40.0, 34.0, 32.0, 24.0, 72.0, 22.0, 12.0, 28.0, 12.0, 24.0,
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 16)
    axial_scale: float = DEFAULT_AXIAL_UM
    lateral_scale_x: float | None = None
    lateral_scale_z: float | None = None
    n_layers: int = N_LAYERS
    intensities: tuple[float, ...] = DEFAULT_INTENSITIES
    thicknesses: tuple[float, ...] = DEFAULT_THICKNESS_UM
    background_above: float = 2000.0
    background_below: float = 6000.0
    pit_depth: float = 50.0
    pit_radius: float = 600.0
    pit_center: tuple[float, float] | None = None
    undulation: float = 6.0
    noise_sd: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.intensities) != self.n_layers or len(self.thicknesses) != self.n_layers:
            raise ValueError("intensities and thicknesses need one entry per layer")
        if any(t <= 0 for t in self.thicknesses):
            raise ValueError("layer thicknesses must be positive")
        levels = [self.background_above, *self.intensities, self.background_below]
        if any(a == b for a, b in zip(levels, levels[1:])):
            raise ValueError("adjacent layers must have distinct intensities")
        if any(not 0 <= v <= 65535 for v in levels):
            raise ValueError("intensities must lie in the u16 range")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.pit_depth < 0 or self.pit_radius <= 0 or self.undulation < 0:
            raise ValueError("pit depth/undulation must be >= 0 and pit radius > 0")

    @property
    def contrast(self) -> float:
        """Intensity range spanned by all tissue classes, backgrounds included."""
        levels = [self.background_above, *self.intensities, self.background_below]
        return float(max(levels) - min(levels))

    def scales(self) -> tuple[float, float]:
        nx, _, nz = self.dims
        sx = self.lateral_scale_x or SCAN_WIDTH_UM / nx
        sz = self.lateral_scale_z or SCAN_WIDTH_UM / nz
        return sx, sz

    def center(self) -> tuple[float, float]:
        if self.pit_center is not None:
            return tuple(float(c) for c in self.pit_center)
        nx, _, nz = self.dims
        return float(nx // 2), float(nz // 2)


def _pit_profile(spec: PhantomSpec) -> np.ndarray:
    nx, _, nz = spec.dims
    sx, sz = spec.scales()
    cx, cz = spec.center()
    dx = (np.arange(nx) - cx)[:, None] * sx
    dz = (np.arange(nz) - cz)[None, :] * sz
    return np.exp(-(dx ** 2 + dz ** 2) / (2.0 * spec.pit_radius ** 2))


def _undulation(spec: PhantomSpec) -> np.ndarray:
    nx, _, nz = spec.dims
    u = np.arange(nx)[:, None] / nx
    w = np.arange(nz)[None, :] / nz
    return spec.undulation * np.sin(2 * np.pi * u + 0.3) * np.cos(np.pi * w + 0.2)


def layer_thickness_fields(spec: PhantomSpec) -> np.ndarray:
    """Per-column thickness (um) of each layer, shape ``(n_layers, nx, nz)``.

    The foveal pit thins layers 1, 3 and 4 and thickens layer 6; the net
    effect is a depression of ``pit_depth`` at the pit centre.
    """
    nx, _, nz = spec.dims
    nominal = np.asarray(spec.thicknesses, dtype=float)
    fields = np.broadcast_to(nominal[:, None, None], (spec.n_layers, nx, nz)).copy()
    if spec.pit_depth > 0 and spec.n_layers == N_LAYERS:
        g = _pit_profile(spec)
        thinned = [0, 2, 3]
        gain = 0.25 * spec.pit_depth
        loss = spec.pit_depth + gain
        pool = nominal[thinned].sum()
        if loss > 0.8 * pool:
            raise ValueError(
                f"pit depth {spec.pit_depth} um too deep for inner layers ({pool} um)"
            )
        for k in thinned:
            fields[k] -= loss * nominal[k] / pool * g
        fields[5] += gain * g
    return fields


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, np.ndarray]:
    """Build a layered phantom and its 12 ground-truth surfaces (voxels)."""
    nx, ny, nz = spec.dims
    depth_um = ny * spec.axial_scale
    nominal_total = float(sum(spec.thicknesses))
    if nominal_total + 2 * spec.undulation + spec.pit_depth * 0.25 >= depth_um:
        raise ValueError(
            f"layers ({nominal_total} um) do not fit in {ny} voxels of {spec.axial_scale} um"
        )
    thick = layer_thickness_fields(spec)
    bottom = 0.5 * (depth_um + nominal_total) + _undulation(spec)
    surfaces_um = np.empty((spec.n_layers + 1, nx, nz))
    surfaces_um[-1] = bottom
    for k in range(spec.n_layers - 1, -1, -1):
        surfaces_um[k] = surfaces_um[k + 1] - thick[k]
    surfaces = surfaces_um / spec.axial_scale
    check_surfaces(surfaces, ny)

    levels = np.asarray(
        [spec.background_above, *spec.intensities, spec.background_below], dtype=float
    )
    y = np.arange(ny, dtype=float)[None, :, None]
    klass = np.zeros((nx, ny, nz), dtype=np.int64)
    for s in surfaces:
        klass += (s[:, None, :] <= y)
    data = levels[klass]
    if spec.noise_sd > 0:
        rng = np.random.default_rng(spec.rng_seed)
        data = data + rng.normal(0.0, spec.noise_sd, size=data.shape)
    data = np.clip(np.rint(data), 0, 65535).astype(np.uint16)
    sx, sz = spec.scales()
    vol = Volume(data, axial_scale=spec.axial_scale, lateral_scale_x=sx, lateral_scale_z=sz)
    return vol, surfaces
