import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    """Collect the ACCEPTANCE lines printed by tests/test_acceptance.py."""
    if report.when == "call":
        _ACCEPTANCE_LINES.extend(l for l in report.capstdout.splitlines() if l.startswith("ACCEPTANCE"))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
