"""Markov normalisation, spectral decomposition and diffusion embedding.

The transition matrix ``P = D^-1 K`` is not symmetric, but it is similar to
``A = D^-1/2 K D^-1/2``.  Eigenpairs are computed on ``A`` and mapped back:
``psi = D^-1/2 phi``.  Right eigenvectors are normalised to unit norm under
the stationary distribution ``pi = d / sum(d)``, so the trivial eigenvector
is the constant 1 and the full-spectrum embedding reproduces diffusion
distances exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1500
MAX_MATVECS = 10_000
KMEANS_MAX_ITER = 300


class GraphError(ValueError):
    pass


class SpectralConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    P: sp.csr_matrix
    degrees: np.ndarray
    kernel: sp.csr_matrix | None = None

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def stationary(self) -> np.ndarray:
        return self.degrees / self.degrees.sum()


@dataclass(frozen=True, eq=False)
class Spectrum:
    eigenvalues: np.ndarray  # (m,), descending
    eigenvectors: np.ndarray  # (n, m), right eigenvectors of P as columns
    stationary: np.ndarray  # (n,)


@dataclass(frozen=True, eq=False)
class Embedding:
    coords: np.ndarray  # (n, omega)
    tau: int

    @property
    def omega(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    """Zero-based labels ``0..K-1`` and per-cluster centroids."""

    labels: np.ndarray
    centroids: np.ndarray
    inertia: float = float("nan")
    history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def markov_normalize(affinity) -> TransitionMatrix:
    """Row-normalise a symmetric non-negative kernel into ``P = D^-1 K``."""
    K = sp.csr_matrix(affinity, dtype=float)
    if K.shape[0] != K.shape[1]:
        raise GraphError("affinity must be square")
    if K.nnz and K.data.min() < 0:
        raise GraphError("affinity has negative entries")
    degrees = np.asarray(K.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degrees <= 0)
    if isolated.size:
        raise GraphError(f"zero-degree nodes: {isolated[:20].tolist()}"
                         + (" ..." if isolated.size > 20 else ""))
    P = K.copy()
    P.data = K.data / np.repeat(degrees, np.diff(K.indptr))
    return TransitionMatrix(P, degrees, K)


def _stationary_dense(P: np.ndarray) -> np.ndarray:
    n = len(P)
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return pi


def as_transition(P) -> TransitionMatrix:
    """Wrap a plain row-stochastic matrix derived from a symmetric kernel."""
    if isinstance(P, TransitionMatrix):
        return P
    dense = P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float)
    pi = _stationary_dense(dense)
    if np.any(pi <= 0):
        raise GraphError("chain has no positive stationary distribution")
    K = pi[:, None] * dense
    K = 0.5 * (K + K.T)
    return TransitionMatrix(sp.csr_matrix(dense), pi, sp.csr_matrix(K))


def _normalise(psi: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    pi = degrees / degrees.sum()
    norms = np.sqrt(np.sum(pi[:, None] * psi ** 2, axis=0))
    psi = psi / norms
    mag = np.abs(psi)
    # first coordinate within rounding of the column maximum
    idx = np.argmax(mag >= mag.max(axis=0) * (1 - 1e-9), axis=0)
    signs = np.sign(psi[idx, np.arange(psi.shape[1])])
    signs[signs == 0] = 1.0
    return psi * signs


def spectral_decompose(P, count: int, which: str = "LM") -> Spectrum:
    """Leading ``count`` eigenpairs of ``P`` with eigenvalues in descending order.

    ``which="LM"`` keeps the largest-magnitude eigenvalues; ``"LA"`` the
    largest algebraic ones.
    """
    T = as_transition(P)
    n = T.n
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    if which not in ("LM", "LA"):
        raise ValueError("which must be 'LM' or 'LA'")
    K = T.kernel if T.kernel is not None else sp.diags(T.degrees) @ T.P
    inv_sqrt = 1.0 / np.sqrt(T.degrees)
    A = sp.csr_matrix(sp.diags(inv_sqrt) @ K @ sp.diags(inv_sqrt))
    A = 0.5 * (A + A.T)

    if n <= DENSE_LIMIT or count >= n - 1:
        vals, vecs = np.linalg.eigh(A.toarray())
        key = np.abs(vals) if which == "LM" else vals
        order = np.argsort(-key, kind="stable")[:count]
        vals, vecs = vals[order], vecs[:, order]
    else:
        ncv = min(n, max(2 * count + 1, 20))
        matvecs = [0]

        def mv(v):
            matvecs[0] += 1
            return A @ v

        op = LinearOperator((n, n), matvec=mv, dtype=float)
        # deterministic start vector
        v0 = np.sqrt(T.degrees / T.degrees.sum())
        try:
            vals, vecs = eigsh(op, k=count, which=which, ncv=ncv, v0=v0, tol=0,
                               maxiter=max(1, MAX_MATVECS // ncv))
        except ArpackNoConvergence as exc:
            raise SpectralConvergenceError(
                f"eigensolver did not converge within {MAX_MATVECS} matrix-vector products"
            ) from exc
        logger.debug("eigsh used %d matvecs for n=%d k=%d", matvecs[0], n, count)

    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    psi = _normalise(vecs * inv_sqrt[:, None], T.degrees)
    return Spectrum(vals, psi, T.stationary)


def eigen_residuals(P, spectrum: Spectrum) -> np.ndarray:
    """Relative residuals ``|P psi - lambda psi|_inf / |psi|_inf`` per pair."""
    T = as_transition(P)
    R = T.P @ spectrum.eigenvectors - spectrum.eigenvectors * spectrum.eigenvalues
    return np.abs(R).max(axis=0) / np.abs(spectrum.eigenvectors).max(axis=0)


def embed(spectrum: Spectrum, tau: int, omega: int | None = None) -> Embedding:
    """Diffusion coordinates ``lambda_i^tau psi_i`` over the non-trivial pairs."""
    if isinstance(tau, bool) or int(tau) != tau or tau < 1:
        raise ValueError(f"tau must be a positive integer, got {tau}")
    available = len(spectrum.eigenvalues) - 1
    if omega is None:
        omega = available
    if not 1 <= omega <= available:
        raise ValueError(f"omega must be in [1, {available}], got {omega}")
    lam = spectrum.eigenvalues[1:omega + 1]
    coords = spectrum.eigenvectors[:, 1:omega + 1] * lam ** int(tau)
    return Embedding(coords, int(tau))


def diffusion_distance_oracle(P, tau: int, i: int, j: int) -> float:
    """Stationary-weighted L2 distance between rows ``i`` and ``j`` of ``P^tau``.

    Dense reference computation for small chains (n <= 64).
    """
    dense = P.P.toarray() if isinstance(P, TransitionMatrix) else (
        P.toarray() if sp.issparse(P) else np.asarray(P, dtype=float))
    n = len(dense)
    if n > 64:
        raise ValueError("oracle limited to n <= 64")
    pi = _stationary_dense(dense)
    Pt = np.linalg.matrix_power(dense, int(tau))
    diff = Pt[i] - Pt[j]
    return float(np.sqrt(np.sum(diff ** 2 / pi)))


# -- k-means ---------------------------------------------------------------


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[c] = X[idx]
        closest = np.minimum(closest, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, centers, max_iter):
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(X, centers)
        new = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(X)), new].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers))
        for c in range(len(centers)):
            if counts[c]:
                centers[c] = X[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its centre
            far = ((X - centers[labels]) ** 2).sum(axis=1)
            idx = int(np.argmax(far))
            centers[c] = X[idx]
            labels = labels.copy()
            labels[idx] = c
    d = _sq_dists(X, centers)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return labels, centers, inertia, history


def kmeans(embedding, k: int, seed: int = 0, n_init: int = 1,
           max_iter: int = KMEANS_MAX_ITER) -> ClusterLabels:
    """Lloyd's k-means from k-means++ seeding; the best of ``n_init`` restarts wins."""
    X = np.asarray(getattr(embedding, "coords", embedding), dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    best = None
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_init)):
        centers = kmeans_plusplus(X, k, rng)
        labels, centers, inertia, history = _lloyd(X, centers, max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterLabels(labels, centers, inertia, history)
    return best
