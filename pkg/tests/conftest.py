import numpy as np
import pytest

from metawrapper.data import SyntheticConfig, generate_synthetic
from metawrapper.runtime import keep_large_allocations


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (long running)")
    keep_large_allocations()  # same allocator policy as the CLI


@pytest.fixture(scope="session")
def synthetic():
    """The default-sized synthetic dataset, seed 0."""
    return generate_synthetic(SyntheticConfig(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = SyntheticConfig(n_users=20, n_items=400, pos_per_user=10, neg_per_user=10, history_len=5)
    return generate_synthetic(cfg, np.random.default_rng(0))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line shown in the terminal summary."""
    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
