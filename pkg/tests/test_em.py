import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosody_mdn.em import EmConfig, em_fit, kmeans_pp_centers
from prosody_mdn.gmm import InvalidInputError, log_density


def _two_mode(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.random(n) < 0.5
    return np.where(z, -3.0, 3.0) + rng.standard_normal(n)


def test_single_component_is_closed_form():
    X = np.random.default_rng(0).normal(size=(200, 3)) * [1.0, 2.0, 0.5] + [1.0, -1.0, 0.0]
    gmm, _ = em_fit(X, EmConfig(n_components=1))
    np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(gmm.variances[0], X.var(axis=0), rtol=1e-12)
    assert gmm.weights[0] == 1.0


def test_recovers_two_mode_mixture():
    gmm, _ = em_fit(_two_mode(5000, 1), EmConfig(n_components=2, seed=0))
    np.testing.assert_allclose(np.sort(gmm.means[:, 0]), [-3.0, 3.0], atol=0.15)


def test_identical_points_clamp_to_floor():
    gmm, trace = em_fit(np.full((20, 2), 1.5), EmConfig(n_components=2, variance_floor=1e-6))
    np.testing.assert_array_equal(gmm.variances, 1e-6)
    np.testing.assert_allclose(gmm.means, 1.5)
    assert np.isfinite(trace[-1])


def test_too_few_points():
    with pytest.raises(InvalidInputError):
        em_fit(np.zeros((2, 1)), EmConfig(n_components=3))


def test_non_finite_data():
    with pytest.raises(InvalidInputError):
        em_fit(np.array([[0.0], [np.nan], [1.0]]), EmConfig(n_components=1))


def test_invalid_config():
    with pytest.raises(InvalidInputError):
        EmConfig(n_components=0)
    with pytest.raises(InvalidInputError):
        EmConfig(tol=0.0)


def test_empty_component_is_reseeded():
    # two far clusters, three components: k-means++ may leave one starved
    X = np.concatenate([np.zeros(50), np.full(50, 10.0)])[:, None]
    X = X + np.random.default_rng(0).normal(0, 1e-3, X.shape)
    gmm, trace = em_fit(X, EmConfig(n_components=3, seed=1))
    assert np.all(np.isfinite(gmm.means)) and np.all(np.isfinite(trace))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_trace_is_monotone(M, D, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, D)) + rng.integers(0, 3, size=(120, 1)) * 4.0
    _, trace = em_fit(X, EmConfig(n_components=M, seed=seed))
    assert np.all(np.diff(trace) >= -1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_final_trace_matches_log_density(M, D, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, D)) * rng.uniform(0.5, 2.0, D)
    gmm, trace = em_fit(X, EmConfig(n_components=M, seed=seed))
    assert abs(np.mean(log_density(gmm, X)) - trace[-1]) <= 1e-9


def test_true_mode_count_beats_single_gaussian():
    for seed in range(10):
        X = _two_mode(1000, seed)
        _, t2 = em_fit(X, EmConfig(n_components=2, seed=seed))
        _, t1 = em_fit(X, EmConfig(n_components=1, seed=seed))
        assert t2[-1] - t1[-1] > 0


def test_kmeans_pp_picks_distinct_points():
    X = np.arange(10, dtype=float)[:, None]
    c = kmeans_pp_centers(X, 4, np.random.default_rng(0))
    assert len(np.unique(c)) == 4


def test_same_seed_same_fit():
    X = _two_mode(300, 2)
    a, ta = em_fit(X, EmConfig(n_components=3, seed=4, n_init=3))
    b, tb = em_fit(X, EmConfig(n_components=3, seed=4, n_init=3))
    np.testing.assert_array_equal(a.means, b.means)
    assert ta == tb
