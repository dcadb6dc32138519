"""Redundancy-aware KV-cache eviction (R-KV), baselines and a decode-trace simulator."""

from .cache import CacheConfig, ConfigError, KVCacheState, ModelGeometry, ScoreBundle
from .policy import PolicyKind, aggregate_heads, joint_scores, select
from .simulator import SimulationReport, ngram_redundancy_stats, run
from .trace import DecodeTrace, SynthConfig, TraceFormatError, generate, load, save, spikes_every

__all__ = [
    "CacheConfig", "ConfigError", "KVCacheState", "ModelGeometry", "ScoreBundle",
    "PolicyKind", "aggregate_heads", "joint_scores", "select",
    "SimulationReport", "ngram_redundancy_stats", "run",
    "DecodeTrace", "SynthConfig", "TraceFormatError", "generate", "load", "save", "spikes_every",
]

__version__ = "0.1.0"
