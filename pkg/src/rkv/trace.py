"""Decode traces: the ``.rkvt`` binary format and a seeded synthetic generator.

File layout (all integers little-endian)::

    8 bytes   magic  b"RKVTRACE"
    4 bytes   uint32 version (= 1)
    4 bytes   uint32 header length in bytes
    N bytes   UTF-8 JSON header
    per step: int32 token_id, then float32 queries (layer, kv_head, group, d),
              float32 keys (layer, kv_head, d), float32 values (layer, kv_head, d)

See FORMAT.md for a byte-level walk through and the generator's draw order.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .cache import ConfigError, ModelGeometry
from .kernels import DTYPE

MAGIC = b"RKVTRACE"
VERSION = 1
_PREAMBLE = struct.Struct("<8sII")

GENERATOR_NAME = "splitmix64-boxmuller-v1"


class TraceFormatError(ValueError):
    """A trace file failed validation while loading."""


@dataclass
class TraceStep:
    token_id: int
    queries: np.ndarray  # (layers, kv_heads, group, d)
    keys: np.ndarray  # (layers, kv_heads, d)
    values: np.ndarray
    token_text: Optional[str] = None


@dataclass
class DecodeTrace:
    geometry: ModelGeometry
    token_ids: np.ndarray  # (T,) int32
    queries: np.ndarray  # (T, layers, kv_heads, group, d) float32
    keys: np.ndarray  # (T, layers, kv_heads, d) float32
    values: np.ndarray
    metadata: Dict[str, str] = field(default_factory=dict)
    token_text: Optional[List[str]] = None

    def __post_init__(self):
        g = self.geometry
        T = len(self.token_ids)
        self.token_ids = np.asarray(self.token_ids, dtype=np.int32)
        self.queries = np.asarray(self.queries, dtype=DTYPE)
        self.keys = np.asarray(self.keys, dtype=DTYPE)
        self.values = np.asarray(self.values, dtype=DTYPE)
        want_q = (T, g.n_layers, g.n_kv_heads, g.group_size, g.head_dim)
        want_kv = (T, g.n_layers, g.n_kv_heads, g.head_dim)
        if self.queries.shape != want_q:
            raise ValueError(f"queries have shape {self.queries.shape}, expected {want_q}")
        for name in ("keys", "values"):
            if getattr(self, name).shape != want_kv:
                raise ValueError(
                    f"{name} have shape {getattr(self, name).shape}, expected {want_kv}")
        if self.token_text is not None and len(self.token_text) != T:
            raise ValueError("token_text length does not match step count")
        for name in ("queries", "keys", "values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contain non-finite values")
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def __len__(self):
        return len(self.token_ids)

    def step(self, i) -> TraceStep:
        text = self.token_text[i] if self.token_text is not None else None
        return TraceStep(int(self.token_ids[i]), self.queries[i], self.keys[i],
                         self.values[i], text)

    def __iter__(self):
        for i in range(len(self)):
            yield self.step(i)

    def to_bytes(self) -> bytes:
        g = self.geometry
        header = {
            "n_layers": g.n_layers,
            "n_kv_heads": g.n_kv_heads,
            "group_size": g.group_size,
            "head_dim": g.head_dim,
            "bytes_per_value": g.bytes_per_value,
            "steps": len(self),
            "metadata": self.metadata,
        }
        if self.token_text is not None:
            header["token_text"] = list(self.token_text)
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        records = np.empty(len(self), dtype=_step_dtype(g))
        records["token_id"] = self.token_ids
        records["q"] = self.queries
        records["k"] = self.keys
        records["v"] = self.values
        return _PREAMBLE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + records.tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def labels(self):
        return PlantedLabels.from_metadata(self.metadata, len(self))


def _step_dtype(g: ModelGeometry):
    return np.dtype([
        ("token_id", "<i4"),
        ("q", "<f4", (g.n_layers, g.n_kv_heads, g.group_size, g.head_dim)),
        ("k", "<f4", (g.n_layers, g.n_kv_heads, g.head_dim)),
        ("v", "<f4", (g.n_layers, g.n_kv_heads, g.head_dim)),
    ])


def save(trace: DecodeTrace, path):
    data = trace.to_bytes()
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> DecodeTrace:
    return from_bytes(Path(path).read_bytes(), source=str(path))


def from_bytes(data: bytes, source="<bytes>") -> DecodeTrace:
    if len(data) < _PREAMBLE.size:
        raise TraceFormatError(f"{source}: file too short for the trace preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(
            f"{source}: bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TraceFormatError(
            f"{source}: unsupported trace version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    if start + hlen > len(data):
        raise TraceFormatError(f"{source}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"{source}: header is not valid JSON: {exc}") from None
    try:
        geometry = ModelGeometry(
            n_layers=int(header["n_layers"]),
            n_kv_heads=int(header["n_kv_heads"]),
            group_size=int(header["group_size"]),
            head_dim=int(header["head_dim"]),
            bytes_per_value=int(header.get("bytes_per_value", 2)),
        )
        steps = int(header["steps"])
    except KeyError as exc:
        raise TraceFormatError(f"{source}: header misses field {exc}") from None
    except (ConfigError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"{source}: inconsistent geometry in header: {exc}") from None
    if steps < 0:
        raise TraceFormatError(f"{source}: negative step count {steps}")
    dt = _step_dtype(geometry)
    payload = data[start + hlen:]
    expected = steps * dt.itemsize
    if len(payload) < expected:
        raise TraceFormatError(
            f"{source}: truncated payload, header declares {steps} steps "
            f"({expected} bytes) but only {len(payload)} bytes follow")
    if len(payload) > expected:
        raise TraceFormatError(
            f"{source}: {len(payload) - expected} trailing bytes after {steps} steps")
    records = np.frombuffer(payload, dtype=dt, count=steps)
    text = header.get("token_text")
    try:
        return DecodeTrace(
            geometry,
            records["token_id"].astype(np.int32),
            records["q"].astype(DTYPE),
            records["k"].astype(DTYPE),
            records["v"].astype(DTYPE),
            metadata=header.get("metadata", {}),
            token_text=text,
        )
    except ValueError as exc:
        raise TraceFormatError(f"{source}: {exc}") from None


# --------------------------------------------------------------------------
# deterministic random stream

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """SplitMix64 as a counter stream: output i is ``mix(seed + (i + 1) * gamma)``."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next_u64(self, n):
        with np.errstate(over="ignore"):
            ctr = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + ctr * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK
        return z

    def uniform(self, n):
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n):
        """Box-Muller pairs; consumes ``2 * ceil(n / 2)`` outputs."""
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        out = np.empty((m, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]


# --------------------------------------------------------------------------
# synthetic generator

PHRASE_LEN = 4


@dataclass
class SynthConfig:
    seed: int = 0
    steps: int = 512
    geometry: ModelGeometry = field(default_factory=ModelGeometry)
    n_clusters: int = 4
    cluster_repeat_prob: float = 0.6
    cluster_noise_sigma: float = 0.05
    attention_spike_positions: List[int] = field(default_factory=list)
    spike_gain: float = 8.0
    cluster_attention_gain: float = 3.0
    query_noise: float = 0.5

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if not 0.0 <= self.cluster_repeat_prob <= 1.0:
            raise ConfigError(
                f"cluster_repeat_prob must lie in [0, 1], got {self.cluster_repeat_prob}")
        if self.cluster_noise_sigma < 0:
            raise ConfigError("cluster_noise_sigma must be >= 0")
        if self.n_clusters + 1 > self.geometry.head_dim:
            raise ConfigError("head_dim must exceed n_clusters for orthogonal directions")
        bad = [p for p in self.attention_spike_positions if not 0 <= p < self.steps]
        if bad:
            raise ConfigError(f"spike positions outside the trace: {bad[:5]}")

    def to_dict(self):
        d = asdict(self)
        d["attention_spike_positions"] = sorted(set(self.attention_spike_positions))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["geometry"] = ModelGeometry(**d["geometry"])
        return cls(**d)


def spikes_every(period, steps, offset=None):
    """Spike positions at the middle of every ``period``-step block."""
    if period <= 0:
        return []
    offset = period // 2 if offset is None else offset
    return list(range(offset, steps, period))


def _gram_schmidt(vectors):
    out = np.zeros_like(vectors)
    for i, v in enumerate(vectors):
        w = v.copy()
        for j in range(i):
            w -= np.dot(out[j], w) * out[j]
        out[i] = w / np.linalg.norm(w)
    return out


def generate(cfg: SynthConfig) -> DecodeTrace:
    """Draw a trace with planted redundancy and planted attention spikes.

    Each (layer, kv_head) owns ``n_clusters`` orthonormal cluster directions
    and one salient direction orthogonal to them.  Every step is one of:

    * spike (``s``): key along salient + a fresh random direction, so every
      query attends to it strongly while spikes stay dissimilar to each other;
    * cluster member (``c``): a cluster direction plus Gaussian noise of
      norm about ``cluster_noise_sigma``, chosen with ``cluster_repeat_prob``;
    * novel (``n``): a fresh random direction.

    Queries point along the salient direction and the sum of the cluster
    directions, so attention-only scoring rates cluster members above novel
    tokens.  Token ids of cluster members cycle through a per-cluster phrase.
    """
    g = cfg.geometry
    L, H, G, d, C, T = (g.n_layers, g.n_kv_heads, g.group_size, g.head_dim,
                        cfg.n_clusters, cfg.steps)
    rng = SplitMix64(cfg.seed)

    # 1. directions: (L, H, C + 1, d), last row is the salient direction
    base = rng.normal(L * H * (C + 1) * d).reshape(L, H, C + 1, d)
    for li in range(L):
        for h in range(H):
            base[li, h] = _gram_schmidt(base[li, h])
    clusters, salient = base[:, :, :C], base[:, :, C]

    # 2. step kinds
    u = rng.uniform(2 * T).reshape(T, 2)
    spikes = set(cfg.attention_spike_positions)
    kinds = []
    cluster_ids = np.full(T, -1, dtype=np.int64)
    for t in range(T):
        if t in spikes:
            kinds.append("s")
        elif u[t, 0] < cfg.cluster_repeat_prob:
            kinds.append("c")
            cluster_ids[t] = min(int(u[t, 1] * C), C - 1)
        else:
            kinds.append("n")

    # 3. keys
    noise = rng.normal(T * L * H * d).reshape(T, L, H, d)
    keys = np.empty((T, L, H, d))
    for t, kind in enumerate(kinds):
        if kind == "c":
            dirs = clusters[:, :, cluster_ids[t]] + cfg.cluster_noise_sigma * noise[t] / math.sqrt(d)
        else:
            fresh = noise[t] / np.linalg.norm(noise[t], axis=-1, keepdims=True)
            dirs = salient + fresh if kind == "s" else fresh
            dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        keys[t] = math.sqrt(d) * dirs

    # 4. queries
    topic = clusters.sum(axis=2) / math.sqrt(C)  # (L, H, d)
    q_noise = rng.normal(T * L * H * G * d).reshape(T, L, H, G, d)
    queries = (cfg.spike_gain * salient + cfg.cluster_attention_gain * topic)[None, :, :, None, :]
    queries = queries + cfg.query_noise * q_noise

    # 5. values
    values = rng.normal(T * L * H * d).reshape(T, L, H, d)

    token_ids = np.empty(T, dtype=np.int32)
    seen = np.zeros(C, dtype=np.int64)
    for t, kind in enumerate(kinds):
        if kind == "c":
            c = cluster_ids[t]
            token_ids[t] = c * PHRASE_LEN + seen[c] % PHRASE_LEN
            seen[c] += 1
        else:
            token_ids[t] = C * PHRASE_LEN + t

    metadata = {
        "generator": GENERATOR_NAME,
        "seed": str(cfg.seed),
        "synth_config": json.dumps(cfg.to_dict(), sort_keys=True),
        "token_kinds": "".join(kinds),
        "cluster_ids": ",".join(str(c) for c in cluster_ids),
    }
    return DecodeTrace(g, token_ids, queries.astype(DTYPE), keys.astype(DTYPE),
                       values.astype(DTYPE), metadata=metadata)


@dataclass
class PlantedLabels:
    """Ground truth recovered from a synthetic trace's metadata."""

    kinds: str
    cluster_ids: np.ndarray

    @classmethod
    def from_metadata(cls, metadata, steps):
        kinds = metadata.get("token_kinds")
        if kinds is None or len(kinds) != steps:
            raise ValueError("trace carries no planted labels (not a synthetic trace?)")
        ids = np.array([int(x) for x in metadata["cluster_ids"].split(",")], dtype=np.int64)
        return cls(kinds, ids)

    def spike_positions(self, upto=None):
        upto = len(self.kinds) if upto is None else upto
        return [t for t in range(upto) if self.kinds[t] == "s"]

    def old_duplicates(self, beta, upto=None):
        """Cluster members before ``upto`` minus the ``beta`` newest of each cluster."""
        upto = len(self.kinds) if upto is None else upto
        out = []
        for c in sorted(set(self.cluster_ids[:upto].tolist()) - {-1}):
            members = [t for t in range(upto) if self.cluster_ids[t] == c]
            out.extend(members[:max(len(members) - beta, 0)])
        return sorted(out)
