"""Cache configuration, model geometry and the mutable decode-time KV cache."""

from dataclasses import dataclass, asdict, fields
from typing import List, Optional

import numpy as np

from .kernels import DTYPE


class ConfigError(ValueError):
    """Invalid hyperparameter or geometry."""


@dataclass(frozen=True)
class ModelGeometry:
    n_layers: int = 1
    n_kv_heads: int = 1
    group_size: int = 1  # query heads per KV head; 1 means MHA
    head_dim: int = 64
    bytes_per_value: int = 2

    def __post_init__(self):
        for name in ("n_layers", "n_kv_heads", "group_size", "head_dim",
                     "bytes_per_value"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def n_query_heads(self):
        return self.n_kv_heads * self.group_size

    @property
    def kv_bytes_per_token(self):
        return 2 * self.n_layers * self.n_kv_heads * self.head_dim * self.bytes_per_value

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CacheConfig:
    """Every knob of the eviction policies.

    ``budget_includes_obs`` picks how the observation tokens are counted:
    when true the cache holds at most ``budget`` tokens after compression
    (``budget - obs_window`` selected plus the observation window); when
    false ``budget`` candidates are selected and the observation window
    comes on top.
    """

    budget: int = 1024
    buffer: int = 128
    obs_window: int = 8
    lam: float = 0.1
    sim_threshold: float = 0.9
    recency_keep: int = 8
    pool_half_window: int = 4
    eps: float = 1e-8
    budget_includes_obs: bool = True
    gqa_pool: str = "max"
    snapkv_calibrated: bool = True
    per_head_selection: bool = False

    def __post_init__(self):
        if self.obs_window < 1:
            raise ConfigError("obs_window must be >= 1")
        if self.budget <= self.obs_window:
            raise ConfigError(
                f"budget ({self.budget}) must exceed obs_window ({self.obs_window})")
        if self.buffer <= self.obs_window:
            raise ConfigError(
                f"buffer ({self.buffer}) must exceed obs_window ({self.obs_window})")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.sim_threshold < 1.0:
            raise ConfigError(
                f"similarity threshold must lie in (0, 1), got {self.sim_threshold}")
        if self.recency_keep < 0:
            raise ConfigError("recency_keep must be >= 0")
        if self.pool_half_window < 1:
            raise ConfigError("pool_half_window must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.gqa_pool not in ("max", "mean"):
            raise ConfigError(f"gqa_pool must be 'max' or 'mean', got {self.gqa_pool!r}")

    @property
    def k_select(self):
        """Number of candidates kept at each compression event."""
        if self.budget_includes_obs:
            return self.budget - self.obs_window
        return self.budget

    @property
    def budget_total(self):
        """Upper bound on retained tokens right after a compression event."""
        return self.k_select + self.obs_window

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return CacheConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ScoreBundle:
    """Per-head score vectors over the ``n`` candidates of one layer."""

    importance: np.ndarray  # (H, n)
    redundancy: Optional[np.ndarray]  # (H, n); None for attention-only pipelines
    joint: np.ndarray  # (H, n)
    aggregated: np.ndarray  # (n,)


class LayerCache:
    """K/V storage for every KV head of one layer.

    Retained tokens live in ``keys``/``values`` of shape (H, L, d) with their
    absolute generation positions in ``positions`` (H, L).  Fresh tokens go to
    a preallocated buffer shared by all heads.
    """

    def __init__(self, n_heads, head_dim, buffer_size):
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.keys = np.zeros((n_heads, 0, head_dim), dtype=DTYPE)
        self.values = np.zeros((n_heads, 0, head_dim), dtype=DTYPE)
        self.positions = np.zeros((n_heads, 0), dtype=np.int64)
        self.buffer_keys = np.zeros((n_heads, buffer_size, head_dim), dtype=DTYPE)
        self.buffer_values = np.zeros((n_heads, buffer_size, head_dim), dtype=DTYPE)
        self.buffer_positions = np.zeros(buffer_size, dtype=np.int64)
        self.buffer_len = 0

    @property
    def retained_len(self):
        return self.keys.shape[1]

    def append(self, key_rows, value_rows, position):
        if self.buffer_len >= self.buffer_keys.shape[1]:
            raise RuntimeError("buffer overflow: compression was not triggered")
        j = self.buffer_len
        self.buffer_keys[:, j] = key_rows
        self.buffer_values[:, j] = value_rows
        self.buffer_positions[j] = position
        self.buffer_len += 1

    def full_view(self):
        """Retained tokens followed by buffered ones, oldest first."""
        b = self.buffer_len
        bpos = np.broadcast_to(self.buffer_positions[:b], (self.n_heads, b))
        return (np.concatenate([self.keys, self.buffer_keys[:, :b]], axis=1),
                np.concatenate([self.values, self.buffer_values[:, :b]], axis=1),
                np.concatenate([self.positions, bpos], axis=1))

    def flush_buffer(self):
        """Move the buffer into the retained set without evicting anything."""
        self.keys, self.values, self.positions = self.full_view()
        self.buffer_len = 0


class KVCacheState:
    """Cache of all layers plus the rolling window of recent query states."""

    def __init__(self, geometry: ModelGeometry, cfg: CacheConfig):
        self.geometry = geometry
        self.cfg = cfg
        self.layers: List[LayerCache] = [
            LayerCache(geometry.n_kv_heads, geometry.head_dim, cfg.buffer)
            for _ in range(geometry.n_layers)
        ]
        g = geometry
        # (alpha, layers, kv_heads, group, d) ring of the most recent queries
        self._queries = np.zeros(
            (cfg.obs_window, g.n_layers, g.n_kv_heads, g.group_size, g.head_dim),
            dtype=DTYPE)
        self._q_count = 0
        self.total_seen = 0
        self.evicted = np.zeros(geometry.n_layers, dtype=np.int64)

    @property
    def buffer_len(self):
        return self.layers[0].buffer_len

    def buffer_full(self):
        return self.buffer_len >= self.cfg.buffer

    def append(self, queries, keys, values):
        """Ingest one decoded token.

        ``queries`` is (layers, kv_heads, group, d); ``keys``/``values`` are
        (layers, kv_heads, d).
        """
        pos = self.total_seen
        for li, layer in enumerate(self.layers):
            layer.append(keys[li], values[li], pos)
        self._queries[self._q_count % self.cfg.obs_window] = queries
        self._q_count += 1
        self.total_seen += 1

    def query_window(self, layer):
        """Most recent ``obs_window`` queries of ``layer`` as (H, G, alpha, d)."""
        a = self.cfg.obs_window
        if self._q_count < a:
            raise RuntimeError("fewer decoded tokens than the observation window")
        start = self._q_count % a
        order = [(start + i) % a for i in range(a)]
        q = self._queries[order, layer]  # (alpha, H, G, d)
        return np.ascontiguousarray(q.transpose(1, 2, 0, 3))


@dataclass
class CandidateView:
    keys: np.ndarray  # (H, n, d)
    values: np.ndarray
    positions: np.ndarray  # (H, n)
    obs_keys: np.ndarray  # (H, alpha, d)
    obs_values: np.ndarray
    obs_positions: np.ndarray  # (H, alpha)

    @property
    def n(self):
        return self.keys.shape[1]


def candidate_view(layer: LayerCache, cfg: CacheConfig) -> CandidateView:
    """Split a layer into scoring candidates and the trailing observation window."""
    if layer.buffer_len < cfg.buffer:
        raise RuntimeError(
            f"candidate_view called with buffer at {layer.buffer_len}/{cfg.buffer}")
    keys, values, positions = layer.full_view()
    a = cfg.obs_window
    cut = keys.shape[1] - a
    return CandidateView(keys[:, :cut], values[:, :cut], positions[:, :cut],
                         keys[:, cut:], values[:, cut:], positions[:, cut:])


def apply_selection(layer: LayerCache, view: CandidateView, selected, cfg: CacheConfig):
    """Keep ``selected`` candidates plus the observation window; empty the buffer.

    ``selected`` is either one ascending index array shared by every head or
    a sequence with one index array per head.
    """
    per_head = _per_head_indices(selected, layer.n_heads)
    for idx in per_head:
        if len(idx) > cfg.k_select:
            raise RuntimeError(
                f"{len(idx)} tokens selected but only {cfg.k_select} fit in the budget")
        if len(idx) and (idx.min() < 0 or idx.max() >= view.n):
            raise IndexError("selected index out of candidate range")
    keys, values, positions = [], [], []
    for h, idx in enumerate(per_head):
        idx = np.sort(idx)
        keys.append(np.concatenate([view.keys[h, idx], view.obs_keys[h]]))
        values.append(np.concatenate([view.values[h, idx], view.obs_values[h]]))
        positions.append(np.concatenate([view.positions[h, idx], view.obs_positions[h]]))
    layer.keys = np.stack(keys)
    layer.values = np.stack(values)
    layer.positions = np.stack(positions)
    layer.buffer_len = 0
    return layer


def _per_head_indices(selected, n_heads):
    if isinstance(selected, np.ndarray) and selected.ndim == 1:
        return [selected.astype(np.int64)] * n_heads
    sel = list(selected)
    if not sel:
        return [np.zeros(0, dtype=np.int64)] * n_heads
    if np.ndim(sel[0]) == 0:
        return [np.asarray(sel, dtype=np.int64)] * n_heads
    if len(sel) != n_heads:
        raise ValueError(f"expected {n_heads} per-head selections, got {len(sel)}")
    return [np.asarray(s, dtype=np.int64) for s in sel]
