"""Layer thickness maps, fovea detection and ETDRS sector statistics.

En-face maps are arrays of shape ``(nx, nz)``.  Orientation convention for
the sector grid: +x points nasal in a right eye (temporal in a left eye) and
+z points superior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import N_LAYERS, Volume, write_volume

TOTAL = "TOTAL"
ETDRS_DIAMETERS_UM = (1000.0, 3000.0, 6000.0)
SECTOR_NAMES = {
    1: "fovea",
    2: "parafoveal superior", 3: "parafoveal nasal",
    4: "parafoveal inferior", 5: "parafoveal temporal",
    6: "perifoveal superior", 7: "perifoveal nasal",
    8: "perifoveal inferior", 9: "perifoveal temporal",
}


@dataclass(frozen=True, eq=False)
class ThicknessMap:
    layer: int | str
    values: np.ndarray  # (nx, nz) micrometres
    lateral_scale_x: float
    lateral_scale_z: float

    @property
    def shape(self):
        return self.values.shape


def layer_thickness(surfaces, axial_scale: float, lateral_scales=(None, None)) -> list[ThicknessMap]:
    """Thickness of each of the 11 layers: ``(s[k+1] - s[k]) * axial_scale``."""
    s = np.asarray(getattr(surfaces, "surfaces", surfaces), dtype=float)
    if s.shape[0] != N_LAYERS + 1:
        raise ValueError(f"expected {N_LAYERS + 1} surfaces, got {s.shape[0]}")
    nx, nz = s.shape[1:]
    sx = lateral_scales[0] if lateral_scales[0] is not None else 6000.0 / nx
    sz = lateral_scales[1] if lateral_scales[1] is not None else 6000.0 / nz
    diff = np.diff(s, axis=0)
    if np.any(diff < 0):
        raise ValueError("surfaces are not monotone")
    return [ThicknessMap(k + 1, diff[k] * axial_scale, sx, sz) for k in range(N_LAYERS)]


def total_thickness(maps) -> ThicknessMap:
    maps = list(maps)
    if len(maps) != N_LAYERS:
        raise ValueError(f"need {N_LAYERS} layer maps, got {len(maps)}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("layer maps are on different grids")
    total = np.zeros(shape)
    for m in maps:
        total = total + m.values
    return ThicknessMap(TOTAL, total, maps[0].lateral_scale_x, maps[0].lateral_scale_z)


def find_fovea(rnfl_map, smooth_radius=1) -> tuple[int, int]:
    """Location of minimum box-smoothed RNFL thickness.

    Ties go to the candidate nearest the grid centre, then to the smallest
    ``(x, z)``.
    """
    values = np.asarray(getattr(rnfl_map, "values", rnfl_map), dtype=float)
    if values.size == 0:
        raise ValueError("empty thickness map")
    r = (smooth_radius, smooth_radius) if np.isscalar(smooth_radius) else tuple(smooth_radius)
    size = tuple(2 * int(v) + 1 for v in r)
    smooth = ndimage.uniform_filter(values, size=size, mode="nearest") if max(size) > 1 else values
    cand = np.argwhere(smooth == smooth.min())
    centre = (np.asarray(values.shape) - 1) / 2.0
    d2 = ((cand - centre) ** 2).sum(axis=1)
    best = cand[np.lexsort((cand[:, 1], cand[:, 0], d2))[0]]
    return int(best[0]), int(best[1])


@dataclass(frozen=True, eq=False)
class SectorAssignment:
    center: tuple[float, float]
    diameters: tuple[float, float, float]
    eye: str
    labels: np.ndarray  # (nx, nz), 0 outside the grid, 1..9 sectors


def sector_grid(center, shape, diameters=ETDRS_DIAMETERS_UM, lateral_scales=None,
                eye: str = "right") -> SectorAssignment:
    """Label each pixel with its ETDRS sector (0 outside the outer circle).

    Pixels exactly on a 45 degree diagonal go to the superior/inferior sector.
    """
    nx, nz = shape
    d1, d2, d3 = (float(d) for d in diameters)
    if not 0 < d1 < d2 < d3:
        raise ValueError("diameters must satisfy 0 < d1 < d2 < d3")
    eye = eye.lower()
    if eye not in ("right", "left"):
        raise ValueError(f"eye must be 'right' or 'left', got {eye!r}")
    cx, cz = center
    if not (0 <= cx <= nx - 1 and 0 <= cz <= nz - 1):
        raise ValueError(f"center {center} outside {nx}x{nz} grid")
    sx, sz = lateral_scales if lateral_scales is not None else (6000.0 / nx, 6000.0 / nz)
    dx = (np.arange(nx)[:, None] - cx) * sx
    dz = (np.arange(nz)[None, :] - cz) * sz
    dx, dz = np.broadcast_arrays(dx, dz)
    nasal = dx if eye == "right" else -dx
    rho2 = dx * dx + dz * dz
    vertical = np.abs(dz) >= np.abs(dx)
    quadrant = np.where(vertical, np.where(dz > 0, 0, 2), np.where(nasal > 0, 1, 3))
    labels = np.zeros((nx, nz), dtype=np.int64)
    inner = rho2 <= (d1 / 2) ** 2
    ring1 = ~inner & (rho2 <= (d2 / 2) ** 2)
    ring2 = ~inner & ~ring1 & (rho2 <= (d3 / 2) ** 2)
    labels[inner] = 1
    labels[ring1] = 2 + quadrant[ring1]
    labels[ring2] = 6 + quadrant[ring2]
    return SectorAssignment((cx, cz), (d1, d2, d3), eye, labels)


@dataclass(frozen=True)
class SectorStat:
    mean: float | None
    sd: float | None
    count: int


def sector_stats(thickness, assignment: SectorAssignment) -> dict[int, SectorStat]:
    """Mean and population SD (divisor N) of a map within each of the 9 sectors.

    Sums use exactly-rounded summation, so results do not depend on pixel
    order.
    """
    values = np.asarray(getattr(thickness, "values", thickness), dtype=float)
    labels = assignment.labels
    if values.shape != labels.shape:
        raise ValueError(f"map shape {values.shape} != sector grid {labels.shape}")
    flat_l = labels.ravel()
    flat_v = values.ravel()
    order = np.argsort(flat_l, kind="stable")
    bounds = np.searchsorted(flat_l[order], np.arange(1, 11))
    out = {}
    for sector in range(1, 10):
        group = flat_v[order[bounds[sector - 1]:bounds[sector]]]
        n = len(group)
        if n == 0:
            out[sector] = SectorStat(None, None, 0)
            continue
        mean = math.fsum(group) / n
        # one refinement step; exact for constant sectors
        mean += math.fsum(group - mean) / n
        dev = group - mean
        var = math.fsum(dev * dev) / n
        out[sector] = SectorStat(mean, math.sqrt(var), n)
    return out


def stats_to_json(stats: dict) -> str:
    """Serialise ``{layer: {sector: SectorStat}}`` as JSON keyed layer -> sector."""
    payload = {
        str(layer): {
            str(sector): {"mean": st.mean, "sd": st.sd, "count": st.count}
            for sector, st in sorted(per.items())
        }
        for layer, per in stats.items()
    }
    return json.dumps(payload, indent=2) + "\n"


# -- rendering -------------------------------------------------------------


def _jet(t: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


# 256-entry blue-cyan-yellow-red ramp; entry i = jet(i / 255) scaled to 0..255.
DEFAULT_PALETTE = np.rint(_jet(np.arange(256) / 255.0) * 255).astype(np.uint8)


def render_pseudocolor(thickness, palette=None, value_range=None) -> np.ndarray:
    """Map thickness linearly onto a palette; returns RGB uint8 of shape ``(nz, nx, 3)``.

    Rows are B-scans (z), columns are A-scans (x).  Out-of-range values are
    clamped; NaNs get the first palette entry.
    """
    values = np.asarray(getattr(thickness, "values", thickness), dtype=float)
    pal = DEFAULT_PALETTE if palette is None else np.asarray(palette, dtype=np.uint8)
    if value_range is None:
        value_range = (float(np.nanmin(values)), float(np.nanmax(values)))
    lo, hi = value_range
    if not hi > lo:
        raise ValueError(f"degenerate display range ({lo}, {hi})")
    t = (values - lo) / (hi - lo)
    idx = np.rint(np.clip(np.nan_to_num(t, nan=0.0), 0.0, 1.0) * (len(pal) - 1)).astype(np.int64)
    return pal[idx].transpose(1, 0, 2).copy()


def write_ppm(image: np.ndarray, path) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_map_csv(tmap: ThicknessMap, path) -> None:
    nx, nz = tmap.shape
    lines = ["x,z,value"]
    for z in range(nz):
        for x in range(nx):
            lines.append(f"{x},{z},{float(tmap.values[x, z])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_map_grid(tmap: ThicknessMap, path, axial_scale: float = 1.0) -> None:
    """Store a map in the volume container as a single ``nx x 1 x nz`` f64 slice."""
    data = np.asarray(tmap.values, dtype=float)[:, None, :]
    write_volume(Volume(data, axial_scale, tmap.lateral_scale_x, tmap.lateral_scale_z), path)
