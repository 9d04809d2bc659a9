import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from relictnet.clustering import (
    SUPPORTED_K,
    ClusteringError,
    KMeansModel,
    assign,
    assign_raster,
    fit_kmeans,
    predominant_label,
)


def _clouds(n_per=400, offset=100.0, seed=0, k=2):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(n_per, 4)) + offset * i for i in range(k)]
    return np.concatenate(parts), np.repeat(np.arange(k), n_per)


def test_supported_k_values():
    assert SUPPORTED_K == (2, 4, 6, 8, 10, 12)


def test_k1_centroid_is_pixel_mean():
    X = np.random.default_rng(2).normal(size=(5000, 4)) * 50 + 300
    m = fit_kmeans(X, 1)
    assert np.abs(m.centroids[0] - X.mean(axis=0)).max() <= 1e-9


def test_two_clouds_recover_cloud_means():
    X, truth = _clouds()
    m = fit_kmeans(X, 2, seed=3)
    means = np.array([X[truth == c].mean(axis=0) for c in (0, 1)])
    order = np.argsort(m.centroids[:, 0])
    assert np.abs(m.centroids[order] - means).max() <= 1e-6


def test_inertia_history_non_increasing():
    X = np.random.default_rng(4).normal(size=(3000, 4))
    m = fit_kmeans(X, 6, seed=1, tol=0)
    h = np.array(m.inertia_history)
    assert (np.diff(h) <= 1e-9 * h[:-1]).all()
    assert m.inertia == pytest.approx(h[-1])


def test_three_separated_clusters_partition_agreement():
    X, truth = _clouds(k=3, offset=40.0, seed=9)
    m = fit_kmeans(X, 3, seed=0)
    assert adjusted_rand_score(truth, assign(m, X)) >= 0.99


def test_determinism_and_seed_sensitivity():
    X = np.random.default_rng(5).normal(size=(2000, 4))
    a, b = fit_kmeans(X, 4, seed=7), fit_kmeans(X, 4, seed=7)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.inertia_history == b.inertia_history


def test_subsample_cap_and_standardize():
    X, truth = _clouds(n_per=3000)
    m = fit_kmeans(X, 2, sample_size=500, standardize=True)
    assert m.extra["fit_pixels"] == 500
    assert adjusted_rand_score(truth, assign(m, X)) == 1.0


def test_assign_rules():
    C = np.array([[0.0, 0], [10, 0], [-10, 0], [5, 5]])
    m = KMeansModel(4, C, 0.0, 0, 0, ())
    assert assign(m, [[5.0, 5.0]]).tolist() == [3]
    assert assign(m, [[0.0, 0.0]]).tolist() == [0]
    # equidistant from centroids 1 and 2
    m2 = KMeansModel(3, np.array([[100.0, 100], [1, 0], [-1, 0]]), 0.0, 0, 0, ())
    assert assign(m2, [[0.0, 0.0]]).tolist() == [1]
    with pytest.raises(ClusteringError):
        assign(m, np.zeros((2, 3)))


def test_assign_matches_brute_force_and_raster_shape():
    rng = np.random.default_rng(6)
    C = rng.normal(size=(5, 4))
    X = rng.normal(size=(500, 4))
    m = KMeansModel(5, C, 0.0, 0, 0, ())
    expected = [int(np.argmin([((x - c) ** 2).sum() for c in C])) for x in X]
    assert assign(m, X).tolist() == expected
    grid = X.T.reshape(4, 20, 25)
    np.testing.assert_array_equal(assign_raster(m, grid).ravel(), expected)


def test_predominant_label():
    assert predominant_label(np.full((32, 32), 5)) == 5
    t = np.array([0] * 600 + [1] * 424)
    assert predominant_label(t) == 0
    tie = np.array([7] * 512 + [2] * 512)
    assert predominant_label(tie) == 2
    valid = np.array([False] * 600 + [True] * 424)
    assert predominant_label(t, valid) == 1
    with pytest.raises(ClusteringError):
        predominant_label(t, np.zeros(1024, bool))


def test_fit_errors():
    with pytest.raises(ClusteringError):
        fit_kmeans(np.zeros((3, 4)), 4)
    with pytest.raises(ClusteringError):
        fit_kmeans(np.array([[np.nan, 0.0], [1.0, 1.0]]), 1)
    with pytest.raises(ClusteringError):
        fit_kmeans(np.zeros(10), 2)


def test_model_round_trip(tmp_path):
    X, _ = _clouds()
    m = fit_kmeans(X, 2, standardize=True)
    m.save(tmp_path / "km.json")
    back = KMeansModel.load(tmp_path / "km.json")
    np.testing.assert_array_equal(back.centroids, m.centroids)
    np.testing.assert_array_equal(assign(back, X), assign(m, X))
