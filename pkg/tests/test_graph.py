import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from layerscope.graph import (KernelConfig, build_affinity, build_nodes, estimate_sigma,
                              node_features, resolve_kernel)
from layerscope.volume import PhantomSpec, generate_phantom


def test_exact_tiling():
    nodes = build_nodes((8, 8, 4), (4, 4, 2))
    assert nodes.n == 8
    expected = {(x, y, z) for x in (1.5, 5.5) for y in (1.5, 5.5) for z in (0.5, 2.5)}
    assert {tuple(c) for c in nodes.centroids} == expected


def test_remainder_block():
    nodes = build_nodes((5, 4, 1), (4, 4, 1))
    assert nodes.n == 2
    widths = nodes.hi[:, 0] - nodes.lo[:, 0]
    assert sorted(widths.tolist()) == [1, 4]


def test_large_node_count():
    nodes = build_nodes((512, 496, 19), (8, 8, 1))
    assert nodes.n == 64 * 62 * 19 == 75392


def test_masked_nodes_cover_selection(rng):
    mask = rng.random((6, 9, 2)) < 0.5
    nodes = build_nodes(mask, (2, 3, 1))
    assert np.array_equal(nodes.voxel_node >= 0, mask)
    assert nodes.counts.sum() == mask.sum()


def test_constant_features():
    nodes = build_nodes((8, 8, 2), (4, 4, 1))
    f = node_features(np.full((8, 8, 2), 100.0), nodes)
    assert np.all(f == 100.0)


def test_checker_feature():
    data = (np.indices((4, 4, 1)).sum(axis=0) % 2) * 200.0
    nodes = build_nodes(data.shape, (4, 4, 1))
    assert node_features(data, nodes)[0, 0] == 100.0


def test_phantom_layer_feature():
    spec = PhantomSpec(dims=(16, 128, 2), pit_depth=0, undulation=0)
    vol, s = generate_phantom(spec)
    # layer 6 is the thickest; pick a 1-voxel-tall block well inside it
    y = int(np.ceil(s[5, 0, 0])) + 2
    assert y + 2 < s[6, 0, 0]
    region = vol.data[:, y:y + 2, :]
    nodes = build_nodes(region.shape, (4, 2, 1))
    f = node_features(region, nodes)
    assert np.all(f == spec.intensities[5])


@pytest.mark.parametrize("lo,hi,expected", [(2.0, 12.0, 1.5), (0.0, 1.0, 0.15)])
def test_sigma_rule(lo, hi, expected):
    d = np.array([lo, (lo + hi) / 2, hi])
    assert estimate_sigma(d) == pytest.approx(expected, rel=1e-15)


def test_sigma_zero_range():
    with pytest.raises(ValueError):
        estimate_sigma([5.0, 5.0, 5.0])


def test_self_weight_is_one():
    K = build_affinity(np.zeros((1, 3)), [[7.0]], KernelConfig(1.0, 1.0, radius=2.0))
    assert K[0, 0] == 1.0


def test_hand_evaluated_weight():
    sg = 0.8
    X = np.array([[0.0, 0.0, 0.0], [sg * math.sqrt(2), 0.0, 0.0]])
    K = build_affinity(X, [[3.0], [3.0]], KernelConfig(sg, 1.0, radius=5.0))
    assert K[0, 1] == pytest.approx(0.36787944117144233, rel=1e-12)


def test_outside_radius_not_stored():
    X = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    K = build_affinity(X, [[0.0], [0.0]], KernelConfig(1.0, 1.0, radius=3.0))
    assert K.nnz == 2


def test_resolve_kernel_sets_sigmas():
    nodes = build_nodes((8, 8, 2), (2, 2, 1))
    f = np.arange(nodes.n, dtype=float)[:, None]
    cfg = resolve_kernel(KernelConfig(), nodes, f)
    assert cfg.sigma_geo > 0 and cfg.sigma_feature == pytest.approx(0.15 * (nodes.n - 2))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 10**6), radius=st.floats(0.3, 3.0))
def test_kernel_properties(n, seed, radius):
    r = np.random.default_rng(seed)
    X = r.random((n, 3)) * 3
    F = r.random((n, 2))
    K = build_affinity(X, F, KernelConfig(0.7, 0.4, radius=radius))
    dense = K.toarray()
    # symmetric and bounded
    assert np.array_equal(dense, dense.T)
    stored = K.data
    assert np.all(stored > 0) and np.all(stored <= 1)
    # no more entries per row than neighbours within the radius
    within = (cdist(X, X) < radius).sum(axis=1)
    assert np.all(np.diff(K.indptr) <= within)


@settings(max_examples=40, deadline=None)
@given(d=st.floats(0, 2), extra=st.floats(0, 2), g=st.floats(0, 0.9))
def test_kernel_monotone_in_feature_distance(d, extra, g):
    cfg = KernelConfig(0.5, 0.5, radius=1.0)
    X = np.array([[0.0, 0, 0], [g, 0, 0]])
    k1 = build_affinity(X, [[0.0], [d]], cfg).toarray()[0, 1]
    k2 = build_affinity(X, [[0.0], [d + extra]], cfg).toarray()[0, 1]
    assert k2 <= k1
