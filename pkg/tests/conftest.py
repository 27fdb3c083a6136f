import numpy as np
import pytest

from gridloop.grid import Branch, Bus, build_admittance
from gridloop.scenario_io import reference_scenario

ACCEPTANCE_LINES = {}


def chain_grid(admittances, u_pcc=1.0 + 0.0j, roles=None, shunts=None):
    """Single-phase chain slack-1-2-...; ``roles`` default to loads."""
    n = len(admittances)
    roles = roles or ["load"] * n
    shunts = shunts or {}
    buses = [Bus("s", 1, "slack")] + [Bus(str(i + 1), 1, roles[i], shunts.get(i + 1))
                                      for i in range(n)]
    ids = ["s"] + [str(i + 1) for i in range(n)]
    branches = [Branch(ids[i], ids[i + 1], y) for i, y in enumerate(admittances)]
    return build_admittance(buses, branches, [u_pcc])


@pytest.fixture(scope="session")
def reference():
    return reference_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
