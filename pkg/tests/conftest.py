import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rtdnet.core import Dataset, Instance

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_dataset(n=6, m=3, k=5, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    insts = tuple(
        Instance(f"i{j}", rng.normal(size=m), scale * rng.exponential(1.0 + j % 3, size=k) + 1e-3)
        for j in range(n)
    )
    return Dataset(insts, tuple(f"f{c}" for c in range(m)))


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def tmp_csvs(tmp_path):
    feats = tmp_path / "features.csv"
    runs = tmp_path / "runtimes.csv"
    feats.write_text("instance,a,b\ni1,1.0,2.0\ni2,3.0,\ni3,5.0,6.0\n")
    runs.write_text("instance,seed,runtime\ni1,0,1.0\ni2,0,2.0\ni1,1,3.0\ni2,1,4.0\ni4,0,1.0\n")
    return feats, runs


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        if reporter is not None:
            reporter.write_line(f"\n[acceptance] {line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
