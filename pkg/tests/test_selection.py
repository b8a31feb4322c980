import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssatkit import clustering, models, selection as sel


def _pool(scores, method="pcs"):
    scores = np.asarray(scores, dtype=float)
    return sel.ScoredPool(np.arange(len(scores)), np.zeros(len(scores), dtype=int), scores, method)


def test_counts_examples():
    assert sel.selection_counts(1000, 0.1, 0.6) == (100, 60)
    assert sel.selection_counts(997, 0.1, 0.6) == (99, 59)
    # decimal reading of the ratio: 0.29 * 100 is 29, not 28
    assert sel.selection_counts(100, 0.29, 1.0) == (29, 29)


def test_subset_example():
    pool = _pool(np.random.default_rng(0).uniform(size=1000))
    s = sel.select_subset(pool, 0.1, 0.6, seed=1)
    assert len(s) == 100 and s.n_boundary == 60
    assert len(s.random_positions) == 40
    assert len(np.unique(s.positions)) == 100


def test_beta_one_takes_lowest_scores():
    scores = np.random.default_rng(1).uniform(size=200)
    s = sel.select_subset(_pool(scores), 0.1, 1.0, seed=0)
    np.testing.assert_array_equal(np.sort(s.positions), np.sort(np.argsort(scores)[:20]))


def test_ties_broken_by_lower_index():
    s = sel.select_subset(_pool([0.5, 0.1, 0.1, 0.1, 0.9]), 0.4, 1.0, seed=0)
    np.testing.assert_array_equal(s.boundary_positions, [1, 2])


def test_empty_selection_is_an_error():
    with pytest.raises(sel.SelectionError, match="empty selection"):
        sel.select_subset(_pool([0.1, 0.2, 0.3]), 0.1, 0.5, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.floats(0.001, 1.0), st.floats(0.0, 1.0), st.integers(0, 10**6))
def test_counts_disjointness_and_order(N, alpha, beta, seed):
    n, nb = sel.selection_counts(N, alpha, beta)
    if n == 0:
        return
    scores = np.random.default_rng(seed).uniform(size=N)
    pool = _pool(scores, "lcs-km")
    s = sel.select_subset(pool, alpha, beta, seed)
    assert len(s) == n and s.n_boundary == nb
    assert len(set(s.boundary_positions) & set(s.random_positions)) == 0
    assert pool.selected.sum() == n
    assert (pool.reason == sel.BOUNDARY).sum() == nb
    assert (pool.reason == sel.RANDOM_FILL).sum() == n - nb
    if nb:
        unselected = scores[~pool.selected]
        if len(unselected):
            assert scores[s.boundary_positions].max() <= unselected.min()


def test_random_inclusion_uniform():
    N, alpha = 50, 0.2
    n, _ = sel.selection_counts(N, alpha, 0.5)
    X = np.random.default_rng(0).uniform(size=(N, 2))
    clf = models.init_classifier(2, 2, seed=0, hidden=(4,))
    counts = np.zeros(N)
    trials = 1000
    for seed in range(trials):
        s = sel.select(X, clf, sel.SelectionConfig("random", alpha, 0.5, seed=seed))
        counts[s.positions] += 1
    p = n / N
    sd = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sd)


def test_config_validation():
    with pytest.raises(sel.SelectionError):
        sel.SelectionConfig("entropy")
    with pytest.raises(sel.SelectionError):
        sel.SelectionConfig("pcs", alpha=0.0)
    with pytest.raises(sel.SelectionError):
        sel.SelectionConfig("pcs", beta=1.5)
    with pytest.raises(sel.SelectionError):
        sel.SelectionConfig("lcs-km", k=1)


def test_pcs_uniform_logits_point_scores_one_over_c():
    clf = models.init_classifier(2, 3, seed=0, hidden=(4,))
    # zero the last layer for one region by making every logit equal at x = 0
    clf.weights[-1][:] = 0.0
    clf.biases[-1][:] = 0.0
    pool = sel.compute_scores(np.zeros((3, 2)), clf, "pcs")
    np.testing.assert_allclose(pool.score, 1 / 3)


def test_lcs_km_equidistant_point_ranked_first(monkeypatch):
    X = np.random.default_rng(2).uniform(size=(30, 2))
    clf = models.init_classifier(2, 2, seed=1, hidden=(3,))
    Z = models.latents(clf, X)
    # put the two centroids symmetric about the latent of point 7
    c = np.stack([Z[7] + 0.5, Z[7] - 0.5])
    monkeypatch.setattr(clustering, "kmeans_fit", lambda *a, **k: clustering.KMeansModel(c, 0.0))
    pool = sel.compute_scores(X, clf, "lcs-km", k=2)
    assert pool.score[7] == pytest.approx(0.0, abs=1e-12)
    s = sel.select_subset(pool, 0.1, 1.0, seed=0)
    assert s.positions[0] == 7


def test_lcs_km_ranking_matches_rescoring_oracle():
    X = np.random.default_rng(3).uniform(size=(200, 2))
    clf = models.init_classifier(2, 3, seed=3, hidden=(8, 6))
    pool = sel.compute_scores(X, clf, "lcs-km", seed=3)
    km = clustering.kmeans_fit(models.latents(clf, X), 3, seed=3)
    Z = models.latents(clf, X)
    dists = np.sqrt(((Z[:, None, :] - km.centroids[None]) ** 2).sum(-1))
    dists.sort(axis=1)
    oracle = dists[:, 1] - dists[:, 0]
    np.testing.assert_allclose(pool.score, oracle, atol=1e-12)
    np.testing.assert_array_equal(np.argsort(pool.score, kind="stable"),
                                  sorted(range(200), key=lambda i: (oracle[i], i)))


def test_lcs_gmm_scores_in_unit_interval():
    X = np.random.default_rng(4).uniform(size=(80, 2))
    clf = models.init_classifier(2, 2, seed=0, hidden=(5, 4))
    pool = sel.compute_scores(X, clf, "lcs-gmm", seed=0)
    assert np.all((pool.score >= 0) & (pool.score <= 1))
    assert isinstance(pool.cluster_model, clustering.GmmModel)


def test_pseudo_labels_frozen_and_rerun_identical(tmp_path):
    X = np.random.default_rng(5).uniform(size=(100, 2))
    clf = models.init_classifier(2, 2, seed=0, hidden=(5,))
    cfg = sel.SelectionConfig("lcs-km", 0.2, 0.5, seed=9)
    a, b = sel.select(X, clf, cfg), sel.select(X, clf, cfg)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.pseudo_label, models.predict_labels(models.logits_of(clf, X[a.positions])))
    sel.write_manifest(a.pool, tmp_path / "a.csv")
    sel.write_manifest(b.pool, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    man = sel.read_manifest(tmp_path / "a.csv")
    assert list(man) == ["index", "pseudo_label", "score", "method", "reason"]
    np.testing.assert_array_equal(man["score"], a.pool.score)
    assert set(man["reason"]) == {sel.BOUNDARY, sel.RANDOM_FILL, sel.UNSELECTED}


def test_duplicate_pool_indices_rejected():
    with pytest.raises(sel.SelectionError):
        sel.ScoredPool(np.array([0, 0]), np.zeros(2, int), np.zeros(2), "pcs")
