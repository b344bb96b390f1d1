import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ems.cases import case_graph  # noqa: E402
from ems.contingency import BaseCase  # noqa: E402
from ems.scenario import build_scenario  # noqa: E402


@pytest.fixture(scope="session")
def ieee():
    return {name: case_graph(name) for name in ("ieee14", "ieee30", "ieee118")}


@pytest.fixture(scope="session")
def base118(ieee):
    return BaseCase.solve(ieee["ieee118"])


@pytest.fixture(scope="session")
def scenario118():
    return build_scenario("ieee118", n_deltas=20, seed=3)


@pytest.fixture(scope="session")
def scenario14():
    return build_scenario("ieee14", n_deltas=12, seed=1, switch_every=4)


CRITERIA_KEY = pytest.StashKey[dict]()
CRITERIA = [f"C{k}" for k in range(1, 11)]


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(CRITERIA_KEY, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA_KEY, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for cid in CRITERIA:
        terminalreporter.write_line(lines.get(cid, f"{cid} FAIL: no verdict (not run, or errored before checking)"))
