"""Analytical memory and operation-count model for budgeted decoding."""

import math
from dataclasses import dataclass, asdict
from decimal import ROUND_HALF_UP, Decimal

from .cache import CacheConfig, ConfigError, ModelGeometry

# Published geometry of the 8B Llama-3 class (GQA: 8 KV heads of width 128).
LLAMA3_8B = ModelGeometry(n_layers=32, n_kv_heads=8, group_size=4, head_dim=128,
                          bytes_per_value=2)

# (generation length, budget) for the fixed-budget rows and the budget
# ratios of the ratio rows of the R-KV efficiency table.
TABLE1_FIXED = [(8192, 1024), (8192, 1536), (8192, 3072),
                (16384, 1024), (16384, 1536), (16384, 3072)]
TABLE1_RATIOS = [0.10, 0.34, 0.54]


def kv_memory(batch, tokens, geometry: ModelGeometry):
    """Bytes of K and V for ``tokens`` cached tokens of each of ``batch`` requests."""
    if batch < 0 or tokens < 0:
        raise ValueError("batch and tokens must be non-negative")
    return (2 * batch * tokens * geometry.n_layers * geometry.n_kv_heads
            * geometry.head_dim * geometry.bytes_per_value)


def query_window_memory(batch, obs_window, geometry: ModelGeometry):
    """Bytes of the cached observation-window queries (every query head)."""
    return (batch * obs_window * geometry.n_layers * geometry.n_query_heads
            * geometry.head_dim * geometry.bytes_per_value)


def saving_fraction(gen_len, budget):
    """Share of the full cache saved by holding ``budget`` tokens: 1 - budget/gen_len."""
    if gen_len <= 0:
        raise ConfigError("generation length must be positive")
    if budget < 0:
        raise ConfigError("budget must be non-negative")
    if budget > gen_len:
        raise ConfigError(f"budget {budget} exceeds generation length {gen_len}")
    return 1.0 - budget / gen_len


def format_pct(fraction, places=2):
    """Percentage string rounded half-up (so 0.90625 prints as 90.63)."""
    q = Decimal(1).scaleb(-places)
    return str((Decimal(repr(100.0 * fraction))).quantize(q, rounding=ROUND_HALF_UP))


def budget_ratio(budget, avg_gen_len):
    if avg_gen_len <= 0:
        raise ConfigError("average generation length must be positive")
    return budget / avg_gen_len


def ratio_budget(ratio, gen_len):
    """Integer budget for a ratio setting (rounded down)."""
    return int(math.floor(ratio * gen_len + 1e-9))


def table1_rows():
    """Memory-saving rows of the efficiency table, as plain dicts.

    Ratio rows are gen-length independent: their saving is ``1 - ratio``;
    the integer budget shown is the one used at 16K tokens.
    """
    rows = []
    for gen_len, budget in TABLE1_FIXED:
        rows.append({"gen_len": gen_len, "setting": f"fixed-{budget}", "budget": budget,
                     "saving_pct": 100.0 * saving_fraction(gen_len, budget)})
    for ratio in TABLE1_RATIOS:
        gen_len = 16384
        rows.append({"gen_len": gen_len, "setting": f"ratio-{round(ratio * 100)}%",
                     "budget": ratio_budget(ratio, gen_len),
                     "saving_pct": 100.0 * saving_fraction(gen_len, ratio * gen_len)})
    return rows


@dataclass
class MemoryBreakdown:
    m_weights: int
    m_budget: int
    m_buffer: int
    m_query_window: int
    m_full: int
    m_total: int
    m_saving: int
    saving_fraction: float

    def to_dict(self):
        return asdict(self)


def memory_breakdown(geometry: ModelGeometry, gen_len, budget, buffer=128, obs_window=8,
                     batch=1, weights_bytes=0) -> MemoryBreakdown:
    m_budget = kv_memory(batch, budget, geometry)
    m_buffer = kv_memory(batch, buffer, geometry)
    m_alpha = query_window_memory(batch, obs_window, geometry)
    m_full = kv_memory(batch, gen_len, geometry)
    return MemoryBreakdown(
        m_weights=int(weights_bytes),
        m_budget=m_budget,
        m_buffer=m_buffer,
        m_query_window=m_alpha,
        m_full=m_full,
        m_total=int(weights_bytes) + m_budget + m_buffer + m_alpha,
        m_saving=m_full - m_budget - m_buffer - m_alpha,
        saving_fraction=saving_fraction(gen_len, budget),
    )


def max_batch_estimate(device_bytes, weights_bytes, per_request_bytes):
    """Requests that fit beside the weights.  A memory-only estimate, not a measurement."""
    if per_request_bytes <= 0:
        raise ValueError("per-request bytes must be positive")
    return max(0, int((device_bytes - weights_bytes) // per_request_bytes))


@dataclass
class ComputeCosts:
    segments: int
    overhead_per_segment: int
    attention_compressed_per_segment: int
    overhead_ops: int
    attention_ops_compressed: int
    attention_ops_full: int
    break_even_gen_len: int

    def to_dict(self):
        return asdict(self)


def compute_costs(cfg: CacheConfig, gen_len) -> ComputeCosts:
    """Unit-cost operation counts for compressed and uncompressed decoding.

    Per segment of ``buffer`` tokens, scoring costs ``alpha*B + B**2`` and
    attending over the compressed cache ``(B + buffer) * buffer``; without
    compression segment ``s`` attends over ``s * buffer`` tokens, costing
    ``s * buffer**2``.
    """
    B, buf, a = cfg.budget, cfg.buffer, cfg.obs_window
    segments = gen_len // buf
    overhead = a * B + B * B
    compressed = (B + buf) * buf
    full_total = buf * buf * segments * (segments + 1) // 2
    # full cost through S segments exceeds compressed cost once buf**2 (S+1)/2 > c
    c = overhead + compressed
    s_even = (2 * c) // (buf * buf)  # smallest S with buf**2 (S + 1) > 2c
    return ComputeCosts(
        segments=segments,
        overhead_per_segment=overhead,
        attention_compressed_per_segment=compressed,
        overhead_ops=overhead * segments,
        attention_ops_compressed=compressed * segments,
        attention_ops_full=full_total,
        break_even_gen_len=s_even * buf,
    )
