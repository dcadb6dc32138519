"""Joint importance/redundancy scoring, head aggregation and token selection."""

import enum
from dataclasses import dataclass

import numpy as np

from .cache import CacheConfig, ScoreBundle
from .importance import attention_gqa, importance_scores, snapkv_prefix_attention
from .kernels import DTYPE, maxpool_rows, top_k_indices
from .redundancy import redundancy_for_keys


class PolicyKind(str, enum.Enum):
    RKV = "rkv"
    SNAPKV = "snapkv"
    FULLKV = "fullkv"
    ATTENTION_ONLY = "attention-only"
    REDUNDANCY_ONLY = "redundancy-only"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"snapkvdecode": "snapkv", "snapkv-decode": "snapkv",
                   "full": "fullkv", "r-kv": "rkv"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown policy {value!r} (choose from {names})") from None

    @property
    def compresses(self):
        return self is not PolicyKind.FULLKV


def effective_lambda(policy, cfg):
    if policy is PolicyKind.ATTENTION_ONLY:
        return 1.0
    if policy is PolicyKind.REDUNDANCY_ONLY:
        return 0.0
    return cfg.lam


def joint_scores(importance, redundancy, lam):
    importance = np.asarray(importance, dtype=DTYPE)
    redundancy = np.asarray(redundancy, dtype=DTYPE)
    if importance.shape != redundancy.shape:
        raise ValueError(
            f"importance {importance.shape} and redundancy {redundancy.shape} differ")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return DTYPE(lam) * importance - DTYPE(1.0 - lam) * redundancy


def aggregate_heads(per_head):
    per_head = [np.asarray(v, dtype=DTYPE) for v in per_head]
    if not per_head:
        raise ValueError("no heads to aggregate")
    if len({v.shape for v in per_head}) != 1:
        raise ValueError("per-head score vectors differ in length")
    return np.stack(per_head).mean(axis=0, dtype=DTYPE)


@dataclass
class ScoreInputs:
    """What one layer exposes to a policy at a compression event."""

    keys: np.ndarray  # candidate keys (H, n, d)
    queries: np.ndarray  # observation queries (H, G, alpha, d)
    obs_keys: np.ndarray  # observation keys (H, alpha, d)

    @property
    def n(self):
        return self.keys.shape[1]

    @property
    def n_heads(self):
        return self.keys.shape[0]


@dataclass
class Selection:
    indices: list  # one ascending index array per head
    bundle: ScoreBundle
    head_votes: np.ndarray  # (n,) heads whose own top-k contains each candidate
    shared: bool


def score(policy, inputs: ScoreInputs, cfg: CacheConfig) -> ScoreBundle:
    """Per-head and aggregated selection scores for one layer."""
    policy = PolicyKind.parse(policy)
    H = inputs.n_heads
    w = cfg.pool_half_window
    if policy is PolicyKind.SNAPKV:
        imp = []
        for h in range(H):
            keys_full = np.concatenate([inputs.keys[h], inputs.obs_keys[h]])
            attn = snapkv_prefix_attention(list(inputs.queries[h]), keys_full, inputs.n,
                                           calibrated=cfg.snapkv_calibrated,
                                           pool=cfg.gqa_pool)
            imp.append(maxpool_rows(attn, w).sum(axis=0, dtype=DTYPE))
        imp = np.stack(imp)
        return ScoreBundle(imp, None, imp, aggregate_heads(imp))

    lam = effective_lambda(policy, cfg)
    imp, red, joint = [], [], []
    for h in range(H):
        keys = inputs.keys[h]
        if lam > 0.0:
            attn = attention_gqa(list(inputs.queries[h]), keys, pool=cfg.gqa_pool)
            i_h = importance_scores(attn, w)
        else:
            i_h = np.zeros(inputs.n, dtype=DTYPE)
        if lam < 1.0:
            r_h = redundancy_for_keys(keys, cfg.sim_threshold, cfg.recency_keep, cfg.eps)
        else:
            r_h = np.zeros(inputs.n, dtype=DTYPE)
        imp.append(i_h)
        red.append(r_h)
        joint.append(joint_scores(i_h, r_h, lam))
    return ScoreBundle(np.stack(imp), np.stack(red), np.stack(joint),
                       aggregate_heads(joint))


def select(policy, inputs: ScoreInputs, cfg: CacheConfig) -> Selection:
    """Choose which candidates survive a compression event."""
    policy = PolicyKind.parse(policy)
    n, H = inputs.n, inputs.n_heads
    k = cfg.k_select
    if n <= 0:
        raise ValueError("no candidates to select from")
    if not policy.compresses or n <= k:
        everything = np.arange(n)
        empty = np.zeros((H, n), dtype=DTYPE)
        bundle = ScoreBundle(empty, None, empty, np.zeros(n, dtype=DTYPE))
        return Selection([everything] * H, bundle, np.full(n, H, dtype=np.int64), True)

    bundle = score(policy, inputs, cfg)
    own = [top_k_indices(bundle.joint[h], k) for h in range(H)]
    votes = np.zeros(n, dtype=np.int64)
    for idx in own:
        votes[idx] += 1
    if cfg.per_head_selection:
        return Selection(own, bundle, votes, False)
    shared = top_k_indices(bundle.aggregated, k)
    return Selection([shared] * H, bundle, votes, True)
