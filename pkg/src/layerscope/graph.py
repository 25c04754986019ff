"""Coarse-grained graph nodes and the sparse Gaussian affinity kernel.

Voxels are grouped into rectangular blocks; each block becomes one node with
a centroid (voxel coordinates) and a feature vector (mean intensity).  Two
nodes are linked when their (axis-weighted) centroid distance is below the
neighbourhood radius, with weight

    exp(-|F_i - F_j|^2 / 2 s_f^2) * exp(-|X_i - X_j|^2 / 2 s_g^2).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

SIGMA_FRACTION = 0.15


@dataclass(frozen=True, eq=False)
class NodeSet:
    """Blocks of voxels acting as graph nodes.

    ``voxel_node`` maps every voxel of the region grid to its node index, or
    -1 for voxels outside the selection.
    """

    block_dims: tuple[int, int, int]
    block_index: np.ndarray  # (n, 3) block grid coordinates
    lo: np.ndarray  # (n, 3) inclusive block bounds
    hi: np.ndarray  # (n, 3) exclusive block bounds
    centroids: np.ndarray  # (n, 3) mean member-voxel coordinate
    counts: np.ndarray  # (n,) member voxels
    voxel_node: np.ndarray

    @property
    def n(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel parameters; ``None`` sigmas are estimated from the data."""

    sigma_geo: float | None = None
    sigma_feature: float | None = None
    radius: float = 4.0
    block_dims: tuple[int, int, int] = (8, 8, 1)
    axis_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        for name in ("sigma_geo", "sigma_feature"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0")
        if len(self.block_dims) != 3 or min(self.block_dims) < 1:
            raise ValueError("block_dims must be three ints >= 1")
        if len(self.axis_weights) != 3 or min(self.axis_weights) <= 0:
            raise ValueError("axis_weights must be three positive numbers")


def build_nodes(region, block_dims) -> NodeSet:
    """Tile a region with blocks of ``block_dims`` voxels (ceil division).

    ``region`` is either a shape ``(nx, ny, nz)`` or a boolean mask of that
    shape; with a mask, each node holds only the selected voxels of its block.
    """
    block_dims = tuple(int(b) for b in block_dims)
    if len(block_dims) != 3 or min(block_dims) < 1:
        raise ValueError(f"block_dims must be three ints >= 1, got {block_dims}")
    if isinstance(region, np.ndarray) and region.dtype == bool:
        mask = region
        shape = mask.shape
    else:
        shape = tuple(int(s) for s in region)
        mask = None
    if len(shape) != 3 or min(shape) < 1 or (mask is not None and not mask.any()):
        raise ValueError("empty region")

    grid = [-(-s // b) for s, b in zip(shape, block_dims)]
    coords = np.indices(shape, dtype=np.int64)
    bid = np.zeros(shape, dtype=np.int64)
    for axis in range(3):
        bid = bid * grid[axis] + coords[axis] // block_dims[axis]
    if mask is None:
        sel = np.ones(shape, dtype=bool)
    else:
        sel = mask
    ids, inverse = np.unique(bid[sel], return_inverse=True)
    voxel_node = np.full(shape, -1, dtype=np.int64)
    voxel_node[sel] = inverse
    counts = np.bincount(inverse, minlength=len(ids))
    centroids = np.empty((len(ids), 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(inverse, weights=coords[axis][sel], minlength=len(ids)) / counts
    block_index = np.stack(np.unravel_index(ids, grid), axis=1)
    lo = block_index * np.asarray(block_dims)
    hi = np.minimum(lo + np.asarray(block_dims), np.asarray(shape))
    return NodeSet(block_dims, block_index, lo, hi, centroids, counts, voxel_node)


def node_features(volume, nodes: NodeSet) -> np.ndarray:
    """Mean member intensity of every node, shape ``(n, 1)``."""
    data = getattr(volume, "data", volume)
    sel = nodes.voxel_node >= 0
    sums = np.bincount(nodes.voxel_node[sel], weights=np.asarray(data, dtype=float)[sel],
                       minlength=nodes.n)
    return (sums / nodes.counts)[:, None]


def estimate_sigma(distances) -> float:
    """Return 0.15 times the range of a population of pairwise distances."""
    d = np.asarray(distances, dtype=float).ravel()
    if d.size < 2:
        raise ValueError("need at least two distances to estimate a scale")
    spread = float(d.max() - d.min())
    if not spread > 0:
        raise ValueError("degenerate distance range: all distances are equal")
    return SIGMA_FRACTION * spread


def sample_pairwise_distances(points, max_points: int = 2000, seed: int = 0) -> np.ndarray:
    """Pairwise Euclidean distances over a seeded subset of at most ``max_points``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) > max_points:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), size=max_points, replace=False))]
    return pdist(pts)


def resolve_kernel(cfg: KernelConfig, nodes: NodeSet, features, seed: int = 0) -> KernelConfig:
    """Fill in missing sigmas with the 0.15-range rule."""
    sg, sf = cfg.sigma_geo, cfg.sigma_feature
    if sg is None:
        sg = estimate_sigma(sample_pairwise_distances(
            nodes.centroids * np.asarray(cfg.axis_weights), seed=seed))
    if sf is None:
        sf = estimate_sigma(sample_pairwise_distances(features, seed=seed))
    return replace(cfg, sigma_geo=sg, sigma_feature=sf)


def build_affinity(nodes, features, cfg: KernelConfig) -> sp.csr_matrix:
    """Sparse symmetric kernel matrix over ``nodes``.

    ``nodes`` may be a :class:`NodeSet` or an ``(n, d)`` array of positions.
    Sigmas in ``cfg`` must already be resolved.
    """
    if cfg.sigma_geo is None or cfg.sigma_feature is None:
        raise ValueError("kernel sigmas must be set (see resolve_kernel)")
    X = nodes.centroids if isinstance(nodes, NodeSet) else np.asarray(nodes, dtype=float)
    X = X * np.asarray(cfg.axis_weights)[: X.shape[1]]
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    n = len(X)
    if len(F) != n:
        raise ValueError(f"feature rows ({len(F)}) != node count ({n})")
    if not np.all(np.isfinite(F)):
        raise ValueError("features must be finite")

    pairs = cKDTree(X).query_pairs(cfg.radius, output_type="ndarray")
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        i, j = pairs[:, 0], pairs[:, 1]
        dgeo2 = np.sum((X[i] - X[j]) ** 2, axis=1)
        keep = dgeo2 < cfg.radius ** 2
        i, j, dgeo2 = i[keep], j[keep], dgeo2[keep]
        dfeat2 = np.sum((F[i] - F[j]) ** 2, axis=1)
        w = np.exp(-dfeat2 / (2 * cfg.sigma_feature ** 2)) * np.exp(-dgeo2 / (2 * cfg.sigma_geo ** 2))
        nz = w > 0
        i, j, w = i[nz], j[nz], w[nz]
    else:
        i = j = np.empty(0, dtype=np.int64)
        w = np.empty(0)
    diag = np.arange(n)
    rows = np.concatenate([diag, i, j])
    cols = np.concatenate([diag, j, i])
    vals = np.concatenate([np.ones(n), w, w])
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    K.sort_indices()
    return K


def dump_affinity(K, path) -> None:
    """Write the matrix as ``row col value`` lines (debugging aid)."""
    coo = sp.coo_matrix(K)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# {K.shape[0]} {K.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v!r}\n")
