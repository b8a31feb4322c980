import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ssatkit import clustering as cl
from clusteroracles import density_ratio_posteriors, restart_oracle_wcss

points = hnp.arrays(np.float64, st.tuples(st.integers(4, 25), st.integers(1, 3)),
                    elements=st.floats(-10, 10, allow_subnormal=False))


def test_k1_centroid_is_mean():
    Z = np.random.default_rng(0).normal(size=(30, 3))
    m = cl.kmeans_fit(Z, 1, seed=0)
    np.testing.assert_allclose(m.centroids[0], Z.mean(axis=0), atol=1e-12)


def test_symmetric_two_cluster_example():
    Z = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]], dtype=float)
    m = cl.kmeans_fit(Z, 2, seed=0)
    got = sorted(map(tuple, np.round(m.centroids, 12)))
    assert got == [(0.05, 0.0), (10.05, 0.0)]


def test_kmeans_matches_restart_oracle():
    Z = np.random.default_rng(3).normal(size=(30, 2))
    m = cl.kmeans_fit(Z, 3, seed=0, n_init=20)
    assert abs(m.wcss - restart_oracle_wcss(Z, 3)) < 1e-9


def test_kmeans_too_few_points():
    with pytest.raises(cl.ClusteringError):
        cl.kmeans_fit(np.zeros((2, 2)), 3)


def test_empty_cluster_reseeded():
    # duplicates force an empty cluster from a poor start; all centroids must still be distinct data points or means
    Z = np.array([[0.0], [0.0], [0.0], [5.0]])
    m = cl.kmeans_fit(Z, 2, seed=1)
    assert sorted(m.centroids[:, 0].tolist()) == [0.0, 5.0]
    assert m.wcss == 0.0


@settings(max_examples=40, deadline=None)
@given(points, st.integers(1, 3), st.integers(0, 1000))
def test_wcss_non_increasing_and_deterministic(Z, k, seed):
    m = cl.kmeans_fit(Z, k, seed=seed, n_init=2)
    h = m.history
    assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))
    assert m.wcss >= 0
    again = cl.kmeans_fit(Z, k, seed=seed, n_init=2)
    np.testing.assert_array_equal(m.centroids, again.centroids)


def test_kmeans_boundary_examples():
    m = cl.KMeansModel(np.array([[0.0], [10.0]]), 0.0)
    assert cl.kmeans_boundary_score(3.0, m) == pytest.approx(4.0)
    assert cl.kmeans_boundary_score(5.0, m) == 0.0
    with pytest.raises(cl.ClusteringError):
        cl.kmeans_boundary_score(np.zeros(1), cl.KMeansModel(np.zeros((1, 1)), 0.0))


def test_kmeans_boundary_matches_sort_oracle():
    rng = np.random.default_rng(5)
    m = cl.KMeansModel(rng.normal(size=(5, 4)), 0.0)
    Z = rng.normal(size=(40, 4))
    got = cl.kmeans_boundary_score(Z, m)
    for z, g in zip(Z, got):
        d = sorted(math.dist(z, c) for c in m.centroids)
        assert g == pytest.approx(d[1] - d[0], abs=1e-12)
    assert np.all(got >= 0)
    assert isinstance(cl.kmeans_boundary_score(Z[0], m), float)


# --- GMM -----------------------------------------------------------------------

def test_gmm_k1_closed_form():
    Z = np.random.default_rng(1).normal(size=(50, 2)) * [1.0, 3.0]
    g = cl.gmm_fit(Z, 1, seed=0)
    np.testing.assert_allclose(g.means[0], Z.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.variances[0], Z.var(axis=0), rtol=1e-10)
    np.testing.assert_allclose(g.weights, [1.0])


def test_gmm_variance_floor():
    g = cl.gmm_fit(np.ones((10, 2)), 1)
    assert np.all(g.variances >= cl.VAR_FLOOR)


def test_gmm_recovers_separated_means():
    rng = np.random.default_rng(2)
    Z = np.r_[rng.normal(0, 0.1, 200), rng.normal(10, 0.1, 200)][:, None]
    g = cl.gmm_fit(Z, 2, seed=0)
    np.testing.assert_allclose(sorted(g.means[:, 0]), [0, 10], atol=0.2)


def test_gmm_posteriors_sum_to_one_and_ll_monotone():
    Z = np.random.default_rng(4).normal(size=(120, 3))
    g = cl.gmm_fit(Z, 3, seed=0)
    p = cl.gmm_posteriors(Z, g)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    h = g.history
    assert all(b - a >= -1e-9 for a, b in zip(h, h[1:]))
    assert g.weights.sum() == pytest.approx(1.0)
    assert np.all(g.weights > 0)


@settings(max_examples=30, deadline=None)
@given(points, st.integers(1, 3), st.integers(0, 100))
def test_gmm_properties(Z, k, seed):
    g = cl.gmm_fit(Z, k, seed=seed, n_init=2)
    h = g.history
    assert all(b - a >= -1e-9 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))
    assert np.all(g.variances >= cl.VAR_FLOOR)
    np.testing.assert_allclose(cl.gmm_posteriors(Z, g).sum(axis=1), 1.0, atol=1e-9)
    if k >= 2:
        _, gap = cl.gmm_boundary_score(Z, g)
        assert np.all((gap >= 0) & (gap <= 1))


def test_gmm_closed_form_gap():
    g = cl.GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [4.0]]), np.ones((2, 1)), 0.0)
    p, gap = cl.gmm_boundary_score(1.0, g)
    assert p[0] == pytest.approx(1 / (1 + math.exp(-4)), abs=1e-12)
    # gap = 2 p1 - 1 = tanh(2) = 0.964028, i.e. within 1e-4 of the quoted 0.9641
    assert gap == pytest.approx(math.tanh(2.0), abs=1e-12)
    assert abs(gap - 0.9641) < 1e-4


def test_gmm_symmetric_midpoint():
    g = cl.GmmModel(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.ones((2, 2)), 0.0)
    p, gap = cl.gmm_boundary_score(np.array([0.0, 0.7]), g)
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)
    assert gap == pytest.approx(0.0, abs=1e-15)


def test_gmm_posteriors_match_density_ratio():
    rng = np.random.default_rng(6)
    w = rng.dirichlet(np.ones(3))
    g = cl.GmmModel(w, rng.normal(size=(3, 2)), rng.uniform(0.5, 2, size=(3, 2)), 0.0)
    Z = rng.normal(size=(25, 2))
    p, _ = cl.gmm_boundary_score(Z, g)
    for z, row in zip(Z, p):
        np.testing.assert_allclose(row, density_ratio_posteriors(z, g.weights, g.means, g.variances), rtol=1e-10)


def test_far_points_do_not_underflow():
    g = cl.GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.full((2, 1), 1e-4), 0.0)
    p, gap = cl.gmm_boundary_score(np.array([[500.0]]), g)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(), 1.0)


def test_gmm_deterministic():
    Z = np.random.default_rng(9).normal(size=(60, 2))
    a, b = cl.gmm_fit(Z, 2, seed=3), cl.gmm_fit(Z, 2, seed=3)
    np.testing.assert_array_equal(a.means, b.means)
    assert a.log_likelihood == b.log_likelihood
