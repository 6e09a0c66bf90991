from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dtfl.core import ScenarioConfig, init_scenario

settings.register_profile("dtfl", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dtfl")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(num_nodes=6, num_clusters=2, samples_per_node=40, test_samples=200,
                          hidden_dim=16, rounds_max=8, budget_total=200.0)


@pytest.fixture(scope="session")
def small_scenario(small_config):
    return init_scenario(small_config)


def pytest_configure(config):
    config._dtfl_acceptance = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""
    return request.config._dtfl_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_dtfl_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].lstrip("C"))):
            terminalreporter.write_line(line)
