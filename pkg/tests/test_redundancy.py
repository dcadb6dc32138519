import numpy as np
from hypothesis import given, settings, strategies as st

import oracle
from rkv.redundancy import (
    apply_recency_retention,
    redundancy_for_keys,
    redundancy_scores,
    similarity_matrix,
)


def test_identical_pair():
    np.testing.assert_allclose(similarity_matrix([[0.6, 0.8], [0.6, 0.8]]), [[0, 1], [1, 0]],
                               atol=1e-6)


def test_orthogonal_keys():
    assert np.all(similarity_matrix(np.eye(5) * 3.0) == 0)


def test_random_against_pairwise_cosine(rng):
    keys = rng.standard_normal((12, 6))
    s = similarity_matrix(keys)
    np.testing.assert_allclose(s, s.T, atol=1e-6)
    np.testing.assert_allclose(s, oracle.similarity(keys.tolist(), 1e-8), atol=1e-6)
    assert np.all(np.diag(s) == 0)


def test_retention_below_threshold_is_identity(rng):
    s = rng.uniform(-0.5, 0.5, (8, 8))
    np.testing.assert_array_equal(apply_recency_retention(s, 0.9, 3), s.astype(np.float32))


def test_retention_keeps_oldest():
    s = np.zeros((10, 10))
    i = 4
    for j in (3, 7, 9):
        s[j, i] = 0.95
    out = apply_recency_retention(s, 0.9, 2)
    assert out[7, i] == 0 and out[9, i] == 0
    assert out[3, i] == np.float32(0.95)


def test_retention_beta_covers_everything(rng):
    s = rng.uniform(0, 1, (7, 7))
    out = apply_recency_retention(s, 0.5, 7)
    assert np.all(out[s > 0.5] == 0)
    np.testing.assert_array_equal(out[s <= 0.5], s[s <= 0.5].astype(np.float32))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.floats(0.05, 0.95), st.integers(0, 25), st.integers(0, 2**32 - 1))
def test_retention_against_oracle(n, threshold, beta, seed):
    s = np.random.default_rng(seed).uniform(-1, 1, (n, n)).astype(np.float32)
    out = apply_recency_retention(s, threshold, beta)
    expected = oracle.retain_recent(s.astype(np.float64).tolist(), threshold, beta)
    np.testing.assert_array_equal(out, np.array(expected, dtype=np.float32))
    assert np.all(out <= np.maximum(s, 0))
    changed = out != s
    assert np.all(s[changed] > threshold)


def test_zero_matrix_uniform():
    np.testing.assert_allclose(redundancy_scores(np.zeros((5, 5))), [0.2] * 5, atol=1e-7)


def test_single_token():
    assert redundancy_scores([[0.0]]).tolist() == [1.0]
    assert redundancy_for_keys([[1.0, 2.0]], 0.9, 8).tolist() == [1.0]


def test_duplicate_pair_most_redundant():
    keys = np.eye(6)
    keys[5] = keys[2]
    r = redundancy_for_keys(keys, 0.9, 0)
    top_two = set(np.argsort(-r)[:2].tolist())
    assert top_two == {2, 5}
    others = [0, 1, 3, 4]
    assert r[2] > r[others].max() and r[5] > r[others].max()


def test_adding_duplicate_raises_column_mean(rng):
    keys = rng.standard_normal((8, 6))
    before = similarity_matrix(keys)[:, 3].sum()
    after = similarity_matrix(np.vstack([keys, keys[3]]))[:, 3].sum()
    assert after > before


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_redundancy_is_distribution(n, d, seed):
    keys = np.random.default_rng(seed).standard_normal((n, d))
    r = redundancy_for_keys(keys, 0.9, 2)
    assert np.all(r > 0) and np.all(r <= 1)
    assert abs(r.sum() - 1) < 1e-6
    np.testing.assert_allclose(r, oracle.redundancy(keys.tolist(), 0.9, 2, 1e-8), atol=1e-6)
