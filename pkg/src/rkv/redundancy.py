"""Key-similarity redundancy scores.

Matrix convention: ``s[j, i]`` is the similarity of token ``j`` to the token
``i`` under evaluation, so the redundancy of token ``i`` is read from
column ``i``.
"""

import numpy as np

from .kernels import DTYPE, as_matrix, l2_normalize_rows, matmul_transposed, softmax_vector


def similarity_matrix(keys, eps=1e-8):
    """Cosine similarity of every key pair with the diagonal zeroed."""
    keys = as_matrix(keys, "keys")
    if keys.shape[0] < 1:
        raise ValueError("need at least one key")
    normed = l2_normalize_rows(keys, eps)
    s = matmul_transposed(normed, normed)
    np.fill_diagonal(s, 0.0)
    return s


def apply_recency_retention(s, threshold, beta):
    """Zero ``s[j, i]`` for the ``beta`` most recent ``j`` with ``s[j, i] > threshold``.

    Works column by column; only above-threshold entries can change, so the
    result is generally no longer symmetric.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    s = as_matrix(s, "similarity")
    out = s.copy()
    if beta <= 0:
        return out
    n = s.shape[0]
    # pending[i, r] is True while s[n-1-r, i] is above threshold and not yet
    # zeroed, so each row of ``pending`` scans one column newest-first
    pending = np.ascontiguousarray((s[::-1] > threshold).T)
    cols = np.arange(s.shape[1])
    for _ in range(min(beta, n)):
        r = np.argmax(pending, axis=1)
        hit = pending[cols, r]
        if not hit.any():
            break
        c, r = cols[hit], r[hit]
        out[n - 1 - r, c] = 0.0
        pending[c, r] = False
    return out


def redundancy_scores(s):
    """Softmax over the column means of ``s``."""
    s = as_matrix(s, "similarity")
    if s.shape[0] < 1:
        raise ValueError("empty similarity matrix")
    col_mean = s.mean(axis=0, dtype=DTYPE)
    return softmax_vector(col_mean)


def redundancy_for_keys(keys, threshold, beta, eps=1e-8):
    s = similarity_matrix(keys, eps)
    return redundancy_scores(apply_recency_retention(s, threshold, beta))
