import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.gate_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.gate_lines:
        terminalreporter.write_sep("=", "acceptance gate")
        for line in config.gate_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def gate(request):
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        request.config.gate_lines.append(line)
        assert ok, line

    return record
