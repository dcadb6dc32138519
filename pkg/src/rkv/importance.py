"""Attention-based token importance for MHA and grouped-query heads."""

import math

import numpy as np

from .kernels import DTYPE, as_matrix, matmul_transposed, maxpool_rows, softmax_rows


def raw_scores(q, keys):
    """Pre-softmax scores ``q @ keys.T / sqrt(d)``."""
    q = as_matrix(q, "queries")
    keys = as_matrix(keys, "keys")
    if q.shape[1] != keys.shape[1]:
        raise ValueError(
            f"query width {q.shape[1]} does not match key width {keys.shape[1]}")
    return matmul_transposed(q, keys) / DTYPE(math.sqrt(keys.shape[1]))


def group_raw_scores(q_group, keys, pool="max"):
    """Collapse the raw scores of a query-head group into one (alpha, n) matrix."""
    q_group = list(q_group)
    if not q_group:
        raise ValueError("query group is empty")
    shape = np.shape(q_group[0])
    if any(np.shape(q) != shape for q in q_group):
        raise ValueError("all query matrices in a group must share one shape")
    stacked = np.stack([raw_scores(q, keys) for q in q_group])
    if pool == "max":
        return stacked.max(axis=0)
    if pool == "mean":
        return stacked.mean(axis=0, dtype=DTYPE)
    raise ValueError(f"unknown group pooling {pool!r}")


def attention_mha(q_obs, keys):
    return softmax_rows(raw_scores(q_obs, keys))


def attention_gqa(q_group, keys, pool="max"):
    """Attention of a KV head shared by ``len(q_group)`` query heads.

    Raw scores are pooled across the group first and only then renormalised
    along the key axis, so a single-member group reproduces
    :func:`attention_mha` exactly.
    """
    return softmax_rows(group_raw_scores(q_group, keys, pool))


def importance_scores(attn, w):
    """Window-max-pool every observation row, then average the rows."""
    attn = as_matrix(attn, "attention")
    pooled = maxpool_rows(attn, w)
    return pooled.mean(axis=0, dtype=DTYPE)


def _observation_causal_mask(n_prefix, alpha):
    # observation token j sits at position n_prefix + j and sees keys up to it
    cols = np.arange(n_prefix + alpha)[None, :]
    rows = n_prefix + np.arange(alpha)[:, None]
    return cols <= rows


def snapkv_prefix_attention(q_group, keys_full, n_prefix, calibrated=True, pool="max"):
    """Observation-window attention restricted to the ``n_prefix`` leading keys.

    ``calibrated`` slices the raw scores down to the prefix before the
    softmax, so each row is a distribution over prefix tokens only.  The
    uncalibrated variant applies a causal mask over the full key set, takes
    the softmax, then slices; rows then sum to less than one because the
    observation tokens keep part of the mass.
    """
    if isinstance(q_group, np.ndarray) and q_group.ndim == 2:
        q_group = [q_group]
    raw = group_raw_scores(q_group, keys_full, pool)
    alpha = raw.shape[0]
    if n_prefix + alpha != raw.shape[1]:
        raise ValueError(
            f"expected {n_prefix} prefix keys plus {alpha} observation keys, "
            f"got {raw.shape[1]} keys")
    if calibrated:
        return softmax_rows(raw[:, :n_prefix])
    masked = np.where(_observation_causal_mask(n_prefix, alpha), raw, -np.inf)
    return softmax_rows(masked.astype(DTYPE))[:, :n_prefix]


def snapkv_calibrated_scores(q_obs, keys_full, w, n_prefix=None, pool="max",
                             pooled=True):
    """Summed (and window-pooled) observation attention on the prefix tokens."""
    return _snapkv_scores(q_obs, keys_full, w, n_prefix, True, pool, pooled)


def snapkv_uncalibrated_scores(q_obs, keys_full, w, n_prefix=None, pool="max",
                               pooled=True):
    return _snapkv_scores(q_obs, keys_full, w, n_prefix, False, pool, pooled)


def _snapkv_scores(q_obs, keys_full, w, n_prefix, calibrated, pool, pooled):
    group = [q_obs] if np.ndim(q_obs) == 2 else list(q_obs)
    alpha = np.shape(group[0])[0]
    if n_prefix is None:
        n_prefix = np.shape(keys_full)[0] - alpha
    attn = snapkv_prefix_attention(group, keys_full, n_prefix, calibrated, pool)
    if pooled:
        attn = maxpool_rows(attn, w)
    return attn.sum(axis=0, dtype=DTYPE)
