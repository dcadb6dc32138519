import numpy as np
import pytest

from rkv.cache import CacheConfig, ModelGeometry
from rkv.trace import SynthConfig, generate, spikes_every

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "acceptance", None)
    if marker is not None:
        _acceptance.append((marker, report.outcome, report.duration))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = m.args


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome, duration in sorted(_acceptance, key=lambda x: int(x[0][0])):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {title} ({duration:.2f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_geometry():
    return ModelGeometry(n_layers=2, n_kv_heads=2, group_size=2, head_dim=16)


@pytest.fixture(scope="session")
def small_trace(small_geometry):
    return generate(SynthConfig(seed=3, steps=300, geometry=small_geometry, n_clusters=3,
                                cluster_repeat_prob=0.7, cluster_noise_sigma=0.05,
                                attention_spike_positions=spikes_every(64, 300)))


@pytest.fixture
def small_cfg():
    return CacheConfig(budget=64, buffer=32, obs_window=4, lam=0.1, sim_threshold=0.9,
                       recency_keep=2, pool_half_window=2)
