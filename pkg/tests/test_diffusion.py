import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from layerscope.diffusion import (GraphError, diffusion_distance_oracle, eigen_residuals, embed,
                                  kmeans, markov_normalize, spectral_decompose)


def random_kernel(n, rng, density=0.3):
    A = rng.random((n, n)) * (rng.random((n, n)) < density)
    A = np.triu(A, 1)
    # chain edges keep the graph connected
    A[np.arange(n - 1), np.arange(1, n)] += 0.1 + rng.random(n - 1)
    A = A + A.T + np.eye(n)
    return A


def test_uniform_pair():
    T = markov_normalize([[1.0, 1.0], [1.0, 1.0]])
    assert np.array_equal(T.P.toarray(), [[0.5, 0.5], [0.5, 0.5]])


def test_single_node():
    assert np.array_equal(markov_normalize([[1.0]]).P.toarray(), [[1.0]])


def test_hand_division():
    P = markov_normalize(np.array([[1.0, 3.0], [3.0, 1.0]])).P.toarray()
    assert np.array_equal(P, [[0.25, 0.75], [0.75, 0.25]])


def test_zero_degree_rejected():
    with pytest.raises(GraphError):
        markov_normalize(sp.csr_matrix((3, 3)))


def test_negative_rejected():
    with pytest.raises(GraphError):
        markov_normalize([[1.0, -1.0], [-1.0, 1.0]])


def test_rank_one_spectrum():
    s = spectral_decompose(np.array([[0.5, 0.5], [0.5, 0.5]]), 2)
    assert s.eigenvalues == pytest.approx([1.0, 0.0], abs=1e-12)


def test_two_state_closed_form():
    s = spectral_decompose(np.array([[0.9, 0.1], [0.1, 0.9]]), 2)
    assert s.eigenvalues == pytest.approx([1.0, 0.8], abs=1e-12)
    psi2 = s.eigenvectors[:, 1]
    assert psi2[0] == pytest.approx(-psi2[1], abs=1e-12)
    # unit norm under the stationary weights
    assert np.sum(s.stationary * psi2 ** 2) == pytest.approx(1.0, abs=1e-12)


def test_trivial_pair_constant(rng):
    T = markov_normalize(random_kernel(15, rng))
    s = spectral_decompose(T, 4)
    assert s.eigenvalues[0] == pytest.approx(1.0, abs=1e-10)
    assert np.ptp(s.eigenvectors[:, 0]) < 1e-10


def test_embedding_origin_for_zero_eigenvalue():
    s = spectral_decompose(np.array([[0.5, 0.5], [0.5, 0.5]]), 2)
    e = embed(s, tau=1, omega=1)
    assert np.allclose(e.coords, 0.0, atol=1e-12)


def test_embedding_scales_with_tau():
    s = spectral_decompose(np.array([[0.9, 0.1], [0.1, 0.9]]), 2)
    e = embed(s, tau=2, omega=1)
    assert np.allclose(e.coords[:, 0], 0.64 * s.eigenvectors[:, 1], rtol=1e-12)


def test_embed_validation():
    s = spectral_decompose(np.array([[0.9, 0.1], [0.1, 0.9]]), 2)
    with pytest.raises(ValueError):
        embed(s, tau=0)
    with pytest.raises(ValueError):
        embed(s, tau=1, omega=2)


def test_oracle_zero_cases():
    P = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert diffusion_distance_oracle(P, 1, 0, 0) == 0.0
    assert diffusion_distance_oracle(P, 3, 0, 1) == pytest.approx(0.0, abs=1e-12)


def test_two_state_oracle_value():
    P = np.array([[0.9, 0.1], [0.1, 0.9]])
    d = diffusion_distance_oracle(P, 1, 0, 1)
    # rows differ by 0.8 in both entries, stationary (0.5, 0.5)
    assert d == pytest.approx(np.sqrt(2 * 0.64 / 0.5), rel=1e-12)
    e = embed(spectral_decompose(P, 2), 1)
    assert np.linalg.norm(e.coords[0] - e.coords[1]) == pytest.approx(d, rel=1e-6)


@pytest.mark.parametrize("tau", [1, 2, 5])
def test_embedding_matches_oracle(rng, tau):
    T = markov_normalize(random_kernel(12, rng))
    e = embed(spectral_decompose(T, T.n), tau)
    for i, j in [(0, 1), (2, 9), (4, 11), (3, 3)]:
        d = diffusion_distance_oracle(T, tau, i, j)
        got = np.linalg.norm(e.coords[i] - e.coords[j])
        assert got == pytest.approx(d, rel=1e-6, abs=1e-12)


def test_iterative_path_matches_dense(rng):
    K = sp.csr_matrix(random_kernel(400, rng, density=0.02))
    T = markov_normalize(K)
    s = spectral_decompose(T, 6)
    dense = np.sort(np.linalg.eigvals(T.P.toarray()).real)[::-1]
    key = np.argsort(-np.abs(dense))[:6]
    assert np.sort(s.eigenvalues) == pytest.approx(np.sort(dense[key]), abs=1e-8)
    assert eigen_residuals(T, s).max() <= 1e-8


def test_permutation_equivariance(rng):
    K = random_kernel(9, rng)
    perm = rng.permutation(9)
    e1 = embed(spectral_decompose(markov_normalize(K), 9), 1).coords
    e2 = embed(spectral_decompose(markov_normalize(K[np.ix_(perm, perm)]), 9), 1).coords
    # eigenvector signs may flip; compare pairwise distances
    d1 = np.linalg.norm(e1[:, None] - e1[None], axis=2)[np.ix_(perm, perm)]
    d2 = np.linalg.norm(e2[:, None] - e2[None], axis=2)
    assert np.allclose(d1, d2, atol=1e-9)


def test_kmeans_single_cluster(rng):
    X = rng.random((20, 3))
    res = kmeans(X, 1)
    assert np.all(res.labels == 0)
    assert np.allclose(res.centroids[0], X.mean(axis=0))


def test_kmeans_separated_groups(rng):
    X = np.vstack([rng.normal(0, 0.1, (30, 2)), rng.normal(10, 0.1, (20, 2))])
    truth = np.r_[np.zeros(30), np.ones(20)]
    res = kmeans(X, 2, seed=3)
    same = res.labels == res.labels[0]
    assert np.array_equal(same, truth == 0)


def test_kmeans_deterministic(rng):
    X = rng.random((60, 4))
    a = kmeans(X, 5, seed=11, n_init=4)
    b = kmeans(X, 5, seed=11, n_init=4)
    assert np.array_equal(a.labels, b.labels)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6))
def test_kmeans_objective_non_increasing(seed, k):
    X = np.random.default_rng(seed).random((40, 3))
    h = kmeans(X, k, seed=seed).history
    assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 60))
def test_row_stochastic(seed, n):
    T = markov_normalize(sp.csr_matrix(random_kernel(n, np.random.default_rng(seed), 0.2)))
    assert np.abs(np.asarray(T.P.sum(axis=1)).ravel() - 1).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 40))
def test_spectral_bounds(seed, n):
    T = markov_normalize(random_kernel(n, np.random.default_rng(seed)))
    s = spectral_decompose(T, n)
    assert abs(s.eigenvalues[0] - 1) <= 1e-8
    assert np.all(np.abs(s.eigenvalues) <= 1 + 1e-8)
