"""Token-by-token decode replay with segment-level compression events."""

import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List

import numpy as np

from .cache import CacheConfig, KVCacheState, apply_selection, candidate_view
from .policy import PolicyKind, ScoreInputs, select
from .trace import DecodeTrace

SCHEMA_VERSION = 1


@dataclass
class StepRecord:
    step: int
    retained_len: List[int]  # per layer, before any compression at this step
    buffer_len: int
    compression_event: bool


@dataclass
class EventRecord:
    event: int
    step: int
    n_candidates: List[int]  # per layer
    retained_len: List[int]  # per layer, after the event
    retained_positions: List[List[List[int]]]  # [layer][head] -> absolute positions
    vote_positions: List[List[int]]  # [layer] -> positions scored at this event
    head_votes: List[List[int]]  # [layer] -> heads preferring each position


@dataclass
class SimulationReport:
    policy: str
    config: Dict
    geometry: Dict
    trace_digest: str
    trace_steps: int
    per_step: List[StepRecord]
    per_event: List[EventRecord]
    final_positions: List[List[List[int]]]  # [layer][head], retained + buffered
    peak_cache_tokens: int
    peak_cache_bytes: int
    wall_time: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_step"] = [StepRecord(**s) for s in d["per_step"]]
        d["per_event"] = [EventRecord(**e) for e in d["per_event"]]
        return cls(**d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def comparable(self):
        """Dict form without the wall-clock field."""
        d = self.to_dict()
        d.pop("wall_time")
        return d

    @property
    def n_events(self):
        return len(self.per_event)


def run(trace: DecodeTrace, policy, cfg: CacheConfig, workers=1) -> SimulationReport:
    """Replay ``trace`` through a cache governed by ``policy``.

    When the buffer fills, compressing policies run one event per layer;
    FullKV just moves the buffer into the retained set.
    """
    policy = PolicyKind.parse(policy)
    if len(trace) == 0:
        raise ValueError("trace has no steps")
    geometry = trace.geometry
    state = KVCacheState(geometry, cfg)
    per_token_layer_bytes = 2 * geometry.n_kv_heads * geometry.head_dim * geometry.bytes_per_value
    per_step, per_event = [], []
    peak_tokens, peak_bytes = 0, 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    t0 = time.perf_counter()
    try:
        for t in range(len(trace)):
            state.append(trace.queries[t], trace.keys[t], trace.values[t])
            retained = [layer.retained_len for layer in state.layers]
            blen = state.buffer_len
            occupancy = [r + blen for r in retained]
            if max(occupancy) > peak_tokens:
                peak_tokens = max(occupancy)
            peak_bytes = max(peak_bytes, sum(occupancy) * per_token_layer_bytes)
            event = state.buffer_full() and policy.compresses
            per_step.append(StepRecord(t, retained, blen, event))
            if not state.buffer_full():
                continue
            if not event:
                for layer in state.layers:
                    layer.flush_buffer()
                continue
            per_event.append(_compress(state, policy, cfg, len(per_event), t, pool))
    finally:
        if pool is not None:
            pool.shutdown()
    wall = time.perf_counter() - t0

    final = []
    for layer in state.layers:
        _, _, pos = layer.full_view()
        final.append(pos.tolist())
    return SimulationReport(
        policy=policy.value,
        config=cfg.to_dict(),
        geometry=geometry.to_dict(),
        trace_digest=trace.digest(),
        trace_steps=len(trace),
        per_step=per_step,
        per_event=per_event,
        final_positions=final,
        peak_cache_tokens=int(peak_tokens),
        peak_cache_bytes=int(peak_bytes),
        wall_time=wall,
    )


def _compress_layer(state, li, policy, cfg):
    layer = state.layers[li]
    view = candidate_view(layer, cfg)
    inputs = ScoreInputs(view.keys, state.query_window(li), view.obs_keys)
    sel = select(policy, inputs, cfg)
    # head votes: how many KV heads would keep each token on their own scores
    votes = Counter()
    if sel.shared:
        for p, c in zip(view.positions[0].tolist(), sel.head_votes.tolist()):
            votes[p] += c
    else:
        for h, idx in enumerate(sel.indices):
            votes.update(view.positions[h, idx].tolist())
    for p in view.obs_positions[0].tolist():
        votes[p] += layer.n_heads
    evicted = view.n - len(sel.indices[0])
    apply_selection(layer, view, sel.indices, cfg)
    state.evicted[li] += evicted
    order = sorted(votes)
    return view.n, layer.positions.tolist(), order, [votes[p] for p in order]


def _compress(state, policy, cfg, index, step, pool):
    L = len(state.layers)
    if pool is None:
        results = [_compress_layer(state, li, policy, cfg) for li in range(L)]
    else:
        results = list(pool.map(lambda li: _compress_layer(state, li, policy, cfg), range(L)))
    return EventRecord(
        event=index,
        step=step,
        n_candidates=[r[0] for r in results],
        retained_len=[layer.retained_len for layer in state.layers],
        retained_positions=[r[1] for r in results],
        vote_positions=[r[2] for r in results],
        head_votes=[r[3] for r in results],
    )


def ngram_redundancy_stats(tokens, max_n=2):
    """Average occurrence count of the distinct n-grams, for n = 1..max_n.

    ``tokens`` may be a :class:`DecodeTrace` or any sequence of token ids.
    Orders longer than the sequence are omitted.
    """
    if isinstance(tokens, DecodeTrace):
        tokens = tokens.token_ids.tolist()
    tokens = list(tokens)
    stats = {}
    for n in range(1, max_n + 1):
        if len(tokens) < n:
            continue
        grams = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
        stats[n] = sum(grams.values()) / len(grams)
    return stats
