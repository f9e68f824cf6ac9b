import numpy as np
import pytest

from pqpim.errors import ConfigError
from pqpim.kmeans import (
    nearest_centroid,
    reference_kmeans,
    weighted_kmeans,
    weighted_kmeans_warm,
)


def test_objective_non_increasing_random_instances():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 120))
        d = int(rng.integers(2, 12))
        k = int(rng.integers(2, min(12, n)))
        x = rng.normal(size=(n, d)).astype(np.float32)
        w = rng.uniform(0.0, 3.0, size=n).astype(np.float32)
        w[0] = 1.0  # keep the weight sum positive
        _, _, obj = weighted_kmeans(x, w, k, iters=4, rng_seed=seed)
        assert np.all(np.diff(obj) <= 1e-9 * max(1.0, obj[0]))


def test_uniform_weights_bit_match_reference():
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n, d, k = 60, 6, 7
        x = rng.normal(size=(n, d)).astype(np.float32)
        ones = np.ones(n, dtype=np.float32)
        cw, aw, _ = weighted_kmeans(x, ones, k, iters=4, rng_seed=seed)
        cr, ar, _ = reference_kmeans(x, k, iters=4, rng_seed=seed)
        np.testing.assert_array_equal(aw, ar)
        assert cw.tobytes() == cr.tobytes()


def test_heavy_group_pulls_single_centroid():
    # two well-separated 2-point groups; heavy group dominates the
    # closed-form weighted mean
    x = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 0.0], [10.2, 0.0]],
                 dtype=np.float32)
    w = np.array([1000.0, 1000.0, 1.0, 1.0], dtype=np.float32)
    cents, _, _ = weighted_kmeans(x, w, k=1, iters=4, rng_seed=0)
    expected = (w[:, None] * x).sum(axis=0) / w.sum()
    assert np.linalg.norm(cents[0] - expected) <= 1e-3 * np.linalg.norm(expected)


def test_k_equals_n_reaches_zero_objective():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 4)).astype(np.float32)
    w = np.ones(9, dtype=np.float32)
    _, _, obj = weighted_kmeans(x, w, k=9, iters=4, rng_seed=3)
    assert obj[-1] == pytest.approx(0.0, abs=1e-10)


def test_error_cases():
    x = np.zeros((4, 2), dtype=np.float32)
    with pytest.raises(ConfigError):
        weighted_kmeans(x, np.zeros(4, dtype=np.float32), 2, 2, 0)
    with pytest.raises(ConfigError):
        weighted_kmeans(x, np.ones(4, dtype=np.float32), 5, 2, 0)
    with pytest.raises(ConfigError):
        weighted_kmeans(x, -np.ones(4, dtype=np.float32), 2, 2, 0)


def test_empty_cluster_repair_keeps_k_centroids():
    # nine identical points and one far outlier force empty clusters
    x = np.vstack([np.zeros((9, 2)), [[50.0, 0.0]]]).astype(np.float32)
    w = np.ones(10, dtype=np.float32)
    cents, assign, obj = weighted_kmeans(x, w, k=4, iters=4, rng_seed=1)
    assert cents.shape == (4, 2)
    assert np.all(np.diff(obj) <= 1e-9)


def test_warm_start_runs_from_given_centroids():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(50, 3)).astype(np.float32)
    w = np.ones(50, dtype=np.float32)
    init = x[:5].copy()
    cents, assign, obj = weighted_kmeans_warm(x, w, iters=3, init_centroids=init)
    assert cents.shape == (5, 3)
    assert len(obj) == 3
    assert np.all(np.diff(obj) <= 1e-9 * max(1.0, obj[0]))


def test_nearest_centroid_ties_choose_lowest_index():
    cents = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    x = np.array([[1.0, 0.0]], dtype=np.float32)
    assert nearest_centroid(x, cents)[0] == 0
