"""Dense float32 primitives shared by the scoring code.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float32.  Every
function here is pure: inputs are never modified in place.
"""

import numpy as np

DTYPE = np.float32


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=DTYPE)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul_transposed(a, b):
    """Return ``a @ b.T`` for ``a`` of shape (m, d) and ``b`` of shape (n, d)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"inner dimensions differ: a is {a.shape}, b is {b.shape}")
    return np.matmul(a, b.T).astype(DTYPE, copy=False)


def softmax_rows(m):
    """Row-wise softmax with the row maximum subtracted before ``exp``."""
    m = as_matrix(m)
    if m.shape[0] == 0 or m.shape[1] == 0:
        return m.copy()
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE, copy=False)


def softmax_vector(v):
    return softmax_rows(np.asarray(v, dtype=DTYPE)[None, :])[0]


def l2_normalize_rows(m, eps=1e-8):
    """Divide each row by ``||row|| + eps``; zero rows stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=1, keepdims=True, dtype=DTYPE))
    return (m / (norms + DTYPE(eps))).astype(DTYPE, copy=False)


def pool_bounds(n, w):
    """Inclusive [lo, hi] index bounds of the pooling window for each position.

    The window for position ``i`` is ``[i - w, i + w - 1]`` (width ``2w``).
    Near the sequence edges the window is slid back inside ``[0, n - 1]`` so
    that it keeps its full width; if ``n < 2w`` it covers the whole vector.
    """
    if w < 1:
        raise ValueError(f"pooling half-window must be >= 1, got {w}")
    i = np.arange(n)
    width = min(2 * w, n)
    lo = np.clip(i - w, 0, max(n - width, 0))
    hi = lo + width - 1
    return lo, hi


def maxpool_window(v, w):
    """Sliding max over a window of width ``2w`` (see :func:`pool_bounds`)."""
    v = np.asarray(v, dtype=DTYPE)
    return maxpool_rows(v[None, :], w)[0]


def maxpool_rows(m, w):
    m = as_matrix(m)
    n = m.shape[1]
    lo, _ = pool_bounds(n, w)
    if n == 0:
        return m.copy()
    width = min(2 * w, n)
    # every window has the same width, so a strided view over the row works
    windows = np.lib.stride_tricks.sliding_window_view(m, width, axis=1)
    return windows[:, lo, :].max(axis=2)


def top_k_indices(scores, k):
    """Indices of the ``k`` largest scores, ascending.

    Ties go to the lower index.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    k = max(0, min(int(k), n))
    # stable sort on the negated scores keeps lower indices first among equals
    order = np.argsort(-scores.astype(np.float64), kind="stable")
    return np.sort(order[:k])
