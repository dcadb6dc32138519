"""Acceptance criteria, one test per criterion.

Each test asserts its own runtime bound; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest

import oracle
from rkv import cli
from rkv.analysis import check_cache_bounds, retained_sets, selection_overlap, selection_quality
from rkv.cache import CacheConfig, ModelGeometry
from rkv.efficiency import budget_ratio, format_pct, kv_memory, saving_fraction, table1_rows
from rkv.importance import attention_gqa, attention_mha, snapkv_prefix_attention
from rkv.policy import PolicyKind, ScoreInputs, score, select
from rkv.simulator import SimulationReport, run
from rkv.trace import SynthConfig, from_bytes, generate, load, save, spikes_every

PLANTED_GEOM = ModelGeometry(n_layers=2, n_kv_heads=2, group_size=2, head_dim=64)
PLANTED_CFG = CacheConfig(budget=512, buffer=128, obs_window=8, lam=0.1, sim_threshold=0.9,
                          recency_keep=4)


def planted_trace(seed, steps=2048, geometry=PLANTED_GEOM):
    return generate(SynthConfig(seed=seed, steps=steps, geometry=geometry, n_clusters=4,
                                cluster_repeat_prob=0.8, cluster_noise_sigma=0.05,
                                attention_spike_positions=spikes_every(64, steps)))


@pytest.fixture(scope="module")
def planted():
    return {seed: planted_trace(seed) for seed in (1, 2, 3)}


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.2f}s (limit {self.limit}s)"


@pytest.mark.acceptance("1", "memory-saving table arithmetic")
def test_c1_table_cells():
    with Timer(1.0):
        cells = [format_pct(r["saving_pct"] / 100) for r in table1_rows()]
        assert cells == ["87.50", "81.25", "62.50", "93.75", "90.63", "81.25",
                         "90.00", "66.00", "46.00"]
        fixed = [(8192, 1024, "87.50"), (8192, 1536, "81.25"), (8192, 3072, "62.50"),
                 (16384, 1024, "93.75"), (16384, 1536, "90.63"), (16384, 3072, "81.25")]
        for gen_len, budget, cell in fixed:
            assert format_pct(saving_fraction(gen_len, budget)) == cell


@pytest.mark.acceptance("2", "budget-ratio arithmetic")
def test_c2_budget_ratios():
    with Timer(1.0):
        assert abs(100 * budget_ratio(1024, 2979.1) - 34) <= 0.5
        assert abs(100 * budget_ratio(1536, 15535.8) - 10) <= 0.5


def _random_instance(rng):
    H = int(rng.integers(1, 4))
    G = int(rng.integers(1, 5))
    alpha = int(rng.integers(1, 9))
    n = int(rng.integers(2, 65))
    d = int(rng.integers(2, 17))
    keys = rng.standard_normal((H, n, d))
    # plant near-duplicates so recency retention has work to do
    n_dup = int(rng.integers(0, n // 2 + 1))
    for _ in range(n_dup):
        src, dst = rng.integers(0, n, 2)
        keys[:, dst] = keys[:, src] + 0.05 * rng.standard_normal((H, d))
    queries = rng.standard_normal((H, G, alpha, d))
    cfg = CacheConfig(
        budget=int(rng.integers(1, n + 1)) + alpha, buffer=alpha + 1, obs_window=alpha,
        lam=float(rng.choice([0.0, 1.0, rng.uniform()])),
        sim_threshold=float(rng.uniform(0.3, 0.95)),
        recency_keep=int(rng.integers(0, 6)),
        pool_half_window=int(rng.integers(1, 6)),
    )
    inputs = ScoreInputs(keys.astype(np.float32), queries.astype(np.float32),
                         np.zeros((H, alpha, d), np.float32))
    return inputs, cfg


@pytest.mark.acceptance("3", "pipeline matches brute-force oracle")
def test_c3_oracle_equivalence():
    rng = np.random.default_rng(20240603)
    with Timer(30.0):
        for _ in range(200):
            inputs, cfg = _random_instance(rng)
            q = inputs.queries.astype(np.float64).tolist()
            k = inputs.keys.astype(np.float64).tolist()
            per_head, agg = oracle.rkv_scores(q, k, cfg.lam, cfg.pool_half_window,
                                              cfg.sim_threshold, cfg.recency_keep, cfg.eps)
            bundle = score(PolicyKind.RKV, inputs, cfg)
            np.testing.assert_allclose(bundle.joint, per_head, rtol=0, atol=1e-5)
            np.testing.assert_allclose(bundle.aggregated, agg, rtol=0, atol=1e-5)
            k_sel = min(cfg.k_select, inputs.n)
            expected = oracle.top_k(agg, k_sel)
            if inputs.n <= cfg.k_select:
                expected = list(range(inputs.n))
            assert select(PolicyKind.RKV, inputs, cfg).indices[0].tolist() == expected


@pytest.mark.acceptance("4", "endpoint equivalences, bit-exact")
def test_c4_endpoints():
    rng = np.random.default_rng(7)
    with Timer(10.0):
        for _ in range(100):
            inputs, cfg = _random_instance(rng)
            cfg = cfg.replace(lam=1.0, budget=max(2, inputs.n // 2) + cfg.obs_window)
            a = select(PolicyKind.RKV, inputs, cfg)
            b = select(PolicyKind.ATTENTION_ONLY, inputs, cfg)
            assert np.array_equal(a.bundle.aggregated, b.bundle.aggregated)
            assert [x.tolist() for x in a.indices] == [x.tolist() for x in b.indices]
            q = inputs.queries[0, 0]
            keys = inputs.keys[0]
            assert np.array_equal(attention_gqa([q], keys), attention_mha(q, keys))


@pytest.mark.acceptance("5", "redundancy-eviction scenario")
def test_c5_planted_scenario(planted):
    with Timer(60.0):
        for seed, trace in planted.items():
            labels = trace.labels()
            rkv = selection_quality(run(trace, "rkv", PLANTED_CFG), labels, 4)
            snap = selection_quality(run(trace, "snapkv", PLANTED_CFG), labels, 4)
            assert rkv["n_spikes"] > 0 and rkv["n_old_duplicates"] > 0
            assert rkv["spike_retained"] >= 0.95, (seed, rkv)
            assert rkv["duplicates_evicted"] >= 0.80, (seed, rkv)
            assert snap["duplicates_kept"] > rkv["duplicates_kept"], (seed, rkv, snap)


@pytest.fixture(scope="module")
def bound_trace():
    geometry = ModelGeometry(n_layers=4, n_kv_heads=4, group_size=2, head_dim=64)
    return planted_trace(11, steps=4096, geometry=geometry)


@pytest.mark.acceptance("6", "cache-bound invariant over 4096 steps")
def test_c6_cache_bounds(bound_trace):
    cfg = CacheConfig(budget=512, buffer=128, obs_window=8, recency_keep=4)
    with Timer(10.0):
        for policy in PolicyKind:
            if not policy.compresses:
                continue
            rep = run(bound_trace, policy, cfg)
            assert rep.n_events == 4096 // 128
            check_cache_bounds(rep, cfg)
            assert max(max(s.retained_len) for s in rep.per_step) <= cfg.budget_total


@pytest.mark.acceptance("7", "simulated peak bytes equal the memory model")
def test_c7_peak_bytes():
    geometry = ModelGeometry(n_layers=2, n_kv_heads=2, group_size=2, head_dim=32)
    trace = planted_trace(5, steps=1024, geometry=geometry)
    configs = [
        CacheConfig(budget=512, buffer=128, obs_window=8),
        CacheConfig(budget=256, buffer=64, obs_window=4, budget_includes_obs=False),
        CacheConfig(budget=128, buffer=32, obs_window=8, lam=0.3),
    ]
    with Timer(10.0):
        for cfg in configs:
            rep = run(trace, "rkv", cfg)
            assert rep.peak_cache_tokens == cfg.budget_total + cfg.buffer
            assert rep.peak_cache_bytes == kv_memory(1, cfg.budget_total + cfg.buffer, geometry)


@pytest.mark.acceptance("8", "determinism and format round-trip")
def test_c8_determinism(tmp_path, capsys):
    geometry = ModelGeometry(n_layers=2, n_kv_heads=2, group_size=2, head_dim=32)
    cfg = CacheConfig(budget=128, buffer=64, obs_window=8)
    with Timer(10.0):
        a = planted_trace(9, steps=512, geometry=geometry)
        b = planted_trace(9, steps=512, geometry=geometry)
        assert a.to_bytes() == b.to_bytes()
        path = tmp_path / "a.rkvt"
        save(a, path)
        back = load(path)
        assert path.read_bytes() == a.to_bytes() == back.to_bytes()
        assert from_bytes(back.to_bytes()).to_bytes() == a.to_bytes()
        assert run(a, "rkv", cfg).comparable() == run(back, "rkv", cfg).comparable()
        flags = ["run", str(path), "--policy", "rkv", "--budget", "128", "--buffer", "64"]
        reports = []
        for name in ("r1.json", "r2.json"):
            assert cli.main(flags + ["-o", str(tmp_path / name)]) == 0
            reports.append(SimulationReport.load(tmp_path / name).comparable())
        assert reports[0] == reports[1]
    capsys.readouterr()


@pytest.mark.acceptance("9", "SnapKV calibration check")
def test_c9_calibration():
    rng = np.random.default_rng(3)
    d, alpha, n = 16, 4, 20
    with Timer(1.0):
        q = rng.standard_normal((alpha, d)).astype(np.float32)
        keys = 0.2 * rng.standard_normal((n + alpha, d)).astype(np.float32)
        # the first observation token lines up with every query, soaking up attention
        keys[n] = 3.0 * q.mean(axis=0)
        cal = snapkv_prefix_attention(q, keys, n, calibrated=True)
        unc = snapkv_prefix_attention(q, keys, n, calibrated=False)
        np.testing.assert_allclose(cal.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)
        # every uncalibrated row leaks mass to the window; row 0 sees only the absorber
        assert np.all(unc.sum(axis=1) < 1 - 1e-3)
        assert unc[0].sum() < 0.5
        assert not np.allclose(cal, unc, atol=1e-3)


@pytest.mark.acceptance("10", "lambda sweep endpoints")
def test_c10_lambda_sweep(planted):
    with Timer(60.0):
        initial_evicted = False
        monotone = 0
        for trace in planted.values():
            zero = run(trace, "rkv", PLANTED_CFG.replace(lam=0.0))
            _, sets = retained_sets(zero)
            if any(not set(range(4)) <= s for layer in sets for s in layer):
                initial_evicted = True
            base = run(trace, "attention-only", PLANTED_CFG)
            overlaps = [selection_overlap(run(trace, "rkv", PLANTED_CFG.replace(lam=lam)), base)
                        for lam in (0.1, 0.3, 0.5, 1.0)]
            assert overlaps[-1] == 1.0
            if all(x <= y for x, y in zip(overlaps, overlaps[1:])):
                monotone += 1
        assert initial_evicted
        assert monotone >= 2
