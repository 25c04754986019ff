"""Two-stage diffusion-map layer segmentation.

Stage 1 clusters coarse blocks of the whole volume into three depth-ordered
groups (above the retina, retina, below) and keeps the middle one as a
per-column band.  Stage 2 re-runs the diffusion map on finer blocks inside
that band and clusters them into 11 layers, ordered by mean depth.  Layer
labels are then turned into 12 continuous surfaces.

Stage 2 runs on lateral tiles of the band by default.  Retinal layers are
thin sheets spanning the whole scan, so on one global graph the slow lateral
diffusion modes crowd out the layer-separating ones; inside a narrow tile
every node is a lateral neighbour of every other and only the depth structure
is left for the spectrum to resolve.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .diffusion import embed, kmeans, markov_normalize, spectral_decompose
from .graph import KernelConfig, build_affinity, build_nodes, node_features, resolve_kernel
from .volume import N_LAYERS, N_SURFACES, Volume

logger = logging.getLogger(__name__)

THREADS_ENV = "LAYERSCOPE_THREADS"


class SegmentationError(RuntimeError):
    pass


class LocalizationError(SegmentationError):
    pass


@dataclass(frozen=True)
class StageConfig:
    kernel: KernelConfig
    tau: int = 1
    omega: int = 3
    k: int = 3
    # fraction of the neighbourhood radius spanned by the full lateral extent
    lateral_span: tuple[float, float] = (0.75, 0.4)
    # cluster on log(1 + mean intensity) instead of the mean itself
    log_features: bool = False


def _default_stage1():
    return StageConfig(KernelConfig(radius=17.0, block_dims=(8, 8, 1)), tau=1, omega=2, k=3,
                       log_features=True)


def _default_stage2():
    return StageConfig(KernelConfig(radius=5.5, block_dims=(4, 1, 2)), tau=1, omega=10, k=11,
                       lateral_span=(0.1, 0.1))


@dataclass(frozen=True)
class PipelineConfig:
    stage1: StageConfig = field(default_factory=_default_stage1)
    stage2: StageConfig = field(default_factory=_default_stage2)
    stage2_mode: str = "tiles"  # "tiles", "slice" or "band"
    tile: tuple[int, int] = (8, 4)
    smooth_window: int = 5
    smooth_window_z: int = 1
    kmeans_restarts: int = 8
    eigen_which: str = "LA"
    repair_rounds: int = 3  # 0 disables the over-split repair
    min_separation: float = 1.0
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.stage1.k != 3:
            raise ValueError("stage 1 must cluster into 3 parts")
        if self.stage2.k != N_LAYERS:
            raise ValueError(f"stage 2 must cluster into {N_LAYERS} layers")
        if self.stage2_mode not in ("tiles", "slice", "band"):
            raise ValueError(f"unknown stage2_mode {self.stage2_mode!r}")
        if self.smooth_window < 1 or self.smooth_window_z < 1:
            raise ValueError("smoothing windows must be >= 1")
        if self.repair_rounds < 0 or self.min_separation <= 0:
            raise ValueError("repair_rounds must be >= 0 and min_separation > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Per-column retained band ``[top, bottom)``, arrays of shape ``(nx, nz)``."""

    top: np.ndarray
    bottom: np.ndarray
    filled_columns: int = 0

    def __post_init__(self):
        if np.any(self.top < 0) or np.any(self.bottom <= self.top):
            raise ValueError("mask intervals must satisfy 0 <= top < bottom")

    def voxels(self, ny: int) -> np.ndarray:
        y = np.arange(ny)[None, :, None]
        return (y >= self.top[:, None, :]) & (y < self.bottom[:, None, :])


@dataclass(frozen=True, eq=False)
class LayerLabels:
    """Voxel labels: 0 above the band, 1..11 layers, 12 below, per column."""

    labels: np.ndarray
    tiles: int = 1


@dataclass(frozen=True, eq=False)
class SurfaceSet:
    surfaces: np.ndarray  # (12, nx, nz) fractional voxel depth
    filled_columns: int = 0
    collapsed_layers: int = 0

    @property
    def flagged(self) -> bool:
        return bool(self.filled_columns or self.collapsed_layers)


def _threads(cfg: PipelineConfig) -> int:
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return max(1, min(4, os.cpu_count() or 1))


def _axis_weights(stage: StageConfig, extent_x: int, extent_z: int) -> tuple[float, float, float]:
    r = stage.kernel.radius
    fx, fz = stage.lateral_span
    return (fx * r / max(extent_x, 1), 1.0, fz * r / max(extent_z, 1))


def depth_order(labels: np.ndarray, depth: np.ndarray, k: int) -> np.ndarray:
    """Relabel clusters ``0..k-1`` as ``1..k`` by increasing mean depth.

    Ties are broken by cluster size, larger first.
    """
    labels = np.asarray(labels)
    sizes = np.bincount(labels, minlength=k)
    sums = np.bincount(labels, weights=depth, minlength=k)
    mean = np.where(sizes > 0, sums / np.maximum(sizes, 1), np.inf)
    order = np.lexsort((-sizes, mean))
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(1, k + 1)
    return rank[labels]


def _cluster(nodes, features, stage: StageConfig, cfg: PipelineConfig, seed: int, extent):
    kern = replace(stage.kernel, axis_weights=_axis_weights(stage, *extent))
    kern = resolve_kernel(kern, nodes, features, seed=seed)
    K = build_affinity(nodes, features, kern)
    T = markov_normalize(K)
    count = min(stage.omega + 1, nodes.n)
    spectrum = spectral_decompose(T, count, which=cfg.eigen_which)
    emb = embed(spectrum, stage.tau, count - 1)
    clusters = kmeans(emb, stage.k, seed=seed, n_init=cfg.kmeans_restarts)
    return clusters, kern


def _majority(values) -> int:
    vals, counts = np.unique(values, return_counts=True)
    return int(vals[np.argmax(counts)])


def _refine_edge(column: np.ndarray, start: int, stop: int, thr: float, from_top: bool):
    """First (or last) position in ``[start, stop)`` where two voxels exceed ``thr``."""
    hot = column > thr
    pair = hot[:-1] & hot[1:]
    if from_top:
        for y in range(max(start, 0), min(stop, len(pair))):
            if pair[y]:
                return y
    else:
        for y in range(min(stop, len(column)) - 1, max(start, 1) - 1, -1):
            if pair[y - 1]:
                return y + 1
    return None


def stage1_localize(volume: Volume, cfg: PipelineConfig | None = None) -> RegionMask:
    """Locate the retina band with a 3-cluster diffusion map on coarse blocks."""
    cfg = cfg or PipelineConfig()
    stage = cfg.stage1
    nx, ny, nz = volume.dims
    data = np.asarray(volume.data, dtype=float)
    bx, by, bz = stage.kernel.block_dims
    nodes = build_nodes(volume.dims, stage.kernel.block_dims)
    if nodes.n < stage.k:
        raise LocalizationError("volume too small for stage-1 clustering")
    features = node_features(data, nodes)
    if stage.log_features:
        features = np.log1p(np.maximum(features, 0.0))
    try:
        clusters, _ = _cluster(nodes, features, stage, cfg, cfg.seed, (nx, nz))
    except ValueError as exc:
        raise LocalizationError(f"stage-1 clustering failed: {exc}") from exc

    # The cluster owning the top node row is the vitreous, the one owning the
    # bottom row the tissue below the retina.  Reading the retina as "between
    # the two" rather than "the middle cluster" tolerates partitions in which
    # a bright internal band forms its own cluster.
    labels = clusters.labels
    rows = nodes.block_index[:, 1]
    above_label = _majority(labels[rows == rows.min()])
    below_label = _majority(labels[rows == rows.max()])
    if above_label == below_label:
        raise LocalizationError("stage-1 clusters do not separate the retina from background")
    vox = labels[nodes.voxel_node]
    not_above = vox != above_label
    not_below = vox != below_label
    top = np.argmax(not_above, axis=1)
    bottom = ny - np.argmax(not_below[:, ::-1, :], axis=1)
    has = not_above.any(axis=1) & not_below.any(axis=1) & (bottom > top)
    missing = int((~has).sum())
    if missing > 0.05 * nx * nz:
        raise LocalizationError(
            f"retina not found in {missing} of {nx * nz} columns"
        )
    if missing:
        top, bottom = _fill_from_nearest(top, bottom, has)
    depth = np.arange(ny)[None, :, None]
    inside = (depth >= top[:, None, :]) & (depth < bottom[:, None, :])
    groups = (depth < top[:, None, :], inside, depth >= bottom[:, None, :])
    group_mean = np.array([data[g].mean() if g.any() else np.nan for g in groups])

    # sharpen the block-resolution edges to voxel resolution
    thr_top = 0.5 * (group_mean[0] + group_mean[1])
    thr_bot = 0.5 * (group_mean[2] + group_mean[1])
    if not (np.isfinite(thr_top) and np.isfinite(thr_bot)):
        raise LocalizationError("stage-1 produced an empty cluster")
    top_up = group_mean[1] > group_mean[0]
    bot_up = group_mean[1] > group_mean[2]
    for x in range(nx):
        for z in range(nz):
            col = data[x, :, z] if top_up else -data[x, :, z]
            t = _refine_edge(col, top[x, z] - by - 1, top[x, z] + by + 1,
                             thr_top if top_up else -thr_top, True)
            col = data[x, :, z] if bot_up else -data[x, :, z]
            b = _refine_edge(col, bottom[x, z] - by - 1, bottom[x, z] + by + 1,
                             thr_bot if bot_up else -thr_bot, False)
            if t is not None:
                top[x, z] = t
            if b is not None:
                bottom[x, z] = b
    # isolated speckle hits are removed; monotone edge runs pass unchanged
    top = ndimage.median_filter(top, size=(5, 1), mode="nearest")
    bottom = ndimage.median_filter(bottom, size=(5, 1), mode="nearest")
    bad = bottom <= top
    if bad.any():
        if bad.sum() > 0.05 * nx * nz:
            raise LocalizationError("retina band collapsed in too many columns")
        top, bottom = _fill_from_nearest(top, bottom, ~bad)
        missing += int(bad.sum())
    return RegionMask(top.astype(np.int64), bottom.astype(np.int64), missing)


def _fill_from_nearest(top, bottom, valid):
    _, (ix, iz) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return top[ix, iz].copy(), bottom[ix, iz].copy()


def _best_split(values: np.ndarray):
    """Optimal two-group threshold of 1-D values: (SS reduction, threshold)."""
    v = np.sort(values)
    n = len(v)
    if n < 2:
        return 0.0, None
    c = np.cumsum(v)
    i = np.arange(1, n)
    m1 = c[:-1] / i
    m2 = (c[-1] - c[:-1]) / (n - i)
    gain = i * (n - i) / n * (m1 - m2) ** 2
    j = int(np.argmax(gain))
    return float(gain[j]), 0.5 * (v[j] + v[j + 1])


def _separations(layer, values, k):
    mu = np.array([values[layer == g].mean() for g in range(1, k + 1)])
    sd = np.array([values[layer == g].std() for g in range(1, k + 1)])
    pooled = np.sqrt(sd[:-1] ** 2 + sd[1:] ** 2)
    gap = np.abs(np.diff(mu))
    return np.where(pooled > 0, gap / np.maximum(pooled, 1e-300), np.where(gap > 0, np.inf, 0.0))


def repair_oversplit(layer, values, depth, k: int, min_separation: float = 1.0,
                     max_rounds: int = 3, min_fraction: float = 0.1) -> np.ndarray:
    """Repair a k-means partition that wasted a cluster.

    Two defects are recognised: a tiny cluster (fewer than ``min_fraction``
    of the average cluster size, typically a stray partial-volume node at
    the band edge) and a depth-adjacent pair with indistinguishable mean
    intensity (a thick layer cut in two).  The defect is merged away and
    the cluster that gains most from a two-way intensity split is divided
    instead.  A split is kept only if its halves are separated by
    ``min_separation`` pooled standard deviations.
    """
    layer = np.asarray(layer).copy()
    values = np.asarray(values, dtype=float)
    min_size = max(2.0, min_fraction * len(layer) / k)
    for _ in range(max_rounds):
        sizes = np.bincount(layer, minlength=k + 1)[1:]
        if np.any(sizes == 0):
            break
        mu = np.array([values[layer == g].mean() for g in range(1, k + 1)])
        tiny = np.flatnonzero(sizes < min_size)
        sep = _separations(layer, values, k)
        if tiny.size:
            g = int(tiny[np.argmin(sizes[tiny])]) + 1
            nbrs = [h for h in (g - 1, g + 1) if 1 <= h <= k]
            target = min(nbrs, key=lambda h: abs(mu[h - 1] - mu[g - 1]))
            merged = layer.copy()
            merged[layer == g] = target
        elif sep.min() < min_separation:
            r = int(np.argmin(sep)) + 1
            merged = layer.copy()
            merged[layer == r + 1] = r
        else:
            break
        # compact labels to 1..k-1 keeping depth order
        present = np.unique(merged)
        merged = np.searchsorted(present, merged) + 1
        best = (0.0, None, None)
        for g in range(1, k):
            gain, thr = _best_split(values[merged == g])
            if thr is not None and gain > best[0]:
                best = (gain, g, thr)
        if best[1] is None:
            break
        _, g, thr = best
        upper = (merged == g) & (values > thr)
        lower = (merged == g) & (values <= thr)
        if abs(values[upper].mean() - values[lower].mean()) < min_separation * np.hypot(
                values[upper].std(), values[lower].std()):
            break
        cand = merged.copy()
        cand[upper] = k
        layer = depth_order(cand - 1, depth, k)
    return layer


def _tiles(cfg: PipelineConfig, nx: int, nz: int):
    if cfg.stage2_mode == "band":
        tx, tz = nx, nz
    elif cfg.stage2_mode == "slice":
        tx, tz = nx, 1
    else:
        tx, tz = cfg.tile
    return [(x0, min(x0 + tx, nx), z0, min(z0 + tz, nz))
            for z0 in range(0, nz, tz) for x0 in range(0, nx, tx)]


def stage2_layers(volume: Volume, mask: RegionMask, cfg: PipelineConfig | None = None) -> LayerLabels:
    """Cluster the retained band into 11 depth-ordered layers."""
    cfg = cfg or PipelineConfig()
    stage = cfg.stage2
    nx, ny, nz = volume.dims
    data = np.asarray(volume.data, dtype=float)
    band = mask.voxels(ny)
    tiles = _tiles(cfg, nx, nz)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(tiles))

    def run(i):
        x0, x1, z0, z1 = tiles[i]
        sub = band[x0:x1, :, z0:z1]
        if sub.sum() < stage.k:
            raise SegmentationError(f"tile {tiles[i]}: fewer masked voxels than layers")
        nodes = build_nodes(sub, stage.kernel.block_dims)
        if nodes.n < stage.k:
            raise SegmentationError(f"tile {tiles[i]}: fewer nodes than layers")
        feats = node_features(data[x0:x1, :, z0:z1], nodes)
        if stage.log_features:
            feats = np.log1p(np.maximum(feats, 0.0))
        try:
            clusters, _ = _cluster(nodes, feats, stage, cfg, int(seeds[i]), (x1 - x0, z1 - z0))
        except ValueError as exc:
            raise SegmentationError(f"tile {tiles[i]}: {exc}") from exc
        if len(np.unique(clusters.labels)) < stage.k:
            raise SegmentationError(f"tile {tiles[i]}: fewer than {stage.k} non-empty clusters")
        layer = depth_order(clusters.labels, nodes.centroids[:, 1], stage.k)
        if cfg.repair_rounds:
            layer = repair_oversplit(layer, feats[:, 0], nodes.centroids[:, 1], stage.k,
                                     cfg.min_separation, cfg.repair_rounds)
        return np.where(nodes.voxel_node >= 0, layer[nodes.voxel_node], 0)

    workers = min(_threads(cfg), len(tiles))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(tiles))))
    else:
        parts = [run(i) for i in range(len(tiles))]

    labels = np.zeros((nx, ny, nz), dtype=np.int64)
    for (x0, x1, z0, z1), part in zip(tiles, parts):
        labels[x0:x1, :, z0:z1] = part
    y = np.arange(ny)[None, :, None]
    labels[y >= mask.bottom[:, None, :]] = N_LAYERS + 1
    return LayerLabels(labels, len(tiles))


def extract_surfaces(labels, dims=None, smooth_window: int = 5, smooth_window_z: int = 1) -> SurfaceSet:
    """Turn depth-ordered voxel labels into 12 monotone surfaces.

    ``labels`` holds 0 above the retina, 1..11 for layers and 12 below (or -1
    for unlabelled voxels).  Surface ``k`` sits half a voxel above the first
    voxel whose label is >= k.
    """
    lab = np.asarray(getattr(labels, "labels", labels))
    if dims is not None and tuple(dims) != lab.shape:
        raise ValueError(f"labels shape {lab.shape} does not match dims {tuple(dims)}")
    nx, ny, nz = lab.shape
    valid = (lab >= 1).any(axis=1)
    if not valid.any():
        raise SegmentationError("no labelled voxels")
    raw = np.empty((N_SURFACES, nx, nz))
    for k in range(1, N_SURFACES + 1):
        ge = lab >= k
        first = np.where(ge.any(axis=1), np.argmax(ge, axis=1), ny)
        raw[k - 1] = first - 0.5
    filled = int((~valid).sum())
    if filled:
        _, (ix, iz) = ndimage.distance_transform_edt(~valid, return_indices=True)
        raw = raw[:, ix, iz]
    if smooth_window > 1 or smooth_window_z > 1:
        raw = np.stack([
            ndimage.median_filter(s, size=(smooth_window, smooth_window_z), mode="nearest")
            for s in raw
        ])
    surfaces = np.maximum.accumulate(raw, axis=0)
    surfaces, collapsed = split_collapsed_layers(surfaces)
    surfaces = np.clip(surfaces, 0.0, ny - 0.5)
    return SurfaceSet(surfaces, filled, collapsed)


def split_collapsed_layers(surfaces: np.ndarray) -> tuple[np.ndarray, int]:
    """Give zero-thickness layers a share of the band around them.

    A run of collapsed layers plus the next non-empty layer below (or above,
    at the bottom) is divided into equal parts.  Returns the new surfaces and
    the number of (layer, column) cells repaired.
    """
    out = np.array(surfaces, dtype=float, copy=True)
    n = out.shape[0]
    thick = np.diff(out, axis=0)
    cells = np.argwhere(np.any(thick <= 0, axis=0))
    total_span = out[-1] - out[0]
    repaired = 0
    for x, z in cells:
        if total_span[x, z] <= 0:
            continue
        s = out[:, x, z]
        k = 0
        while k < n - 1:
            if s[k + 1] - s[k] > 0:
                k += 1
                continue
            j = k
            while j < n - 1 and s[j + 1] - s[j] <= 0:
                j += 1
            lo, hi = k, min(j + 1, n - 1)
            if s[hi] - s[lo] <= 0:
                lo = max(lo - 1, 0)
                while lo > 0 and s[hi] - s[lo] <= 0:
                    lo -= 1
            repaired += (j - k)
            s[lo:hi + 1] = np.linspace(s[lo], s[hi], hi - lo + 1)
            k = hi
        out[:, x, z] = s
    return out, repaired


@dataclass
class ErrorReport:
    signed_mean: list
    signed_sd: list
    unsigned_mean: list
    unsigned_sd: list
    overall_signed: tuple
    overall_unsigned: tuple
    units: str = "um"

    def to_dict(self) -> dict:
        return asdict(self)


def border_errors(candidate, reference, axial_scale: float) -> ErrorReport:
    """Signed and unsigned border positioning errors in micrometres.

    Per surface: mean and SD over columns.  Overall: mean and SD of the
    per-surface means.
    """
    cand = np.asarray(getattr(candidate, "surfaces", candidate), dtype=float)
    ref = np.asarray(getattr(reference, "surfaces", reference), dtype=float)
    if cand.shape != ref.shape:
        raise ValueError(f"grid mismatch: {cand.shape} vs {ref.shape}")
    diff = (cand - ref) * axial_scale
    axes = tuple(range(1, diff.ndim))
    signed = diff.mean(axis=axes)
    unsigned = np.abs(diff).mean(axis=axes)
    return ErrorReport(
        signed_mean=signed.tolist(),
        signed_sd=diff.std(axis=axes).tolist(),
        unsigned_mean=unsigned.tolist(),
        unsigned_sd=np.abs(diff).std(axis=axes).tolist(),
        overall_signed=(float(signed.mean()), float(signed.std())),
        overall_unsigned=(float(unsigned.mean()), float(unsigned.std())),
    )


def segment(volume: Volume, cfg: PipelineConfig | None = None):
    """Run both stages and surface extraction. Returns ``(SurfaceSet, RegionMask)``."""
    cfg = cfg or PipelineConfig()
    mask = stage1_localize(volume, cfg)
    labels = stage2_layers(volume, mask, cfg)
    surfaces = extract_surfaces(labels, volume.dims, cfg.smooth_window, cfg.smooth_window_z)
    return surfaces, mask


def run_summary(cfg: PipelineConfig) -> dict:
    """Parameters echoed into run reports."""
    d = cfg.to_dict()
    d["threads_used"] = _threads(cfg)
    return d


__all__ = [
    "PipelineConfig", "StageConfig", "RegionMask", "LayerLabels", "SurfaceSet",
    "ErrorReport", "SegmentationError", "LocalizationError", "stage1_localize",
    "stage2_layers", "extract_surfaces", "border_errors", "segment", "depth_order",
    "split_collapsed_layers", "repair_oversplit",
]
