from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import settings

from carpet_sim.geometry import CellAddress, build_region, unit_region

# numba compiles on first call, so per-example deadlines are meaningless here
settings.register_profile("carpet", deadline=None)
settings.load_profile("carpet")

FIXTURES = Path(__file__).parent / "fixtures"
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(k, ok, detail)``."""
    table = request.config.stash[_CRITERIA]

    def record(k: int, ok: bool, detail: str) -> None:
        line = f"[{k:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        table[k] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for k in sorted(table):
            terminalreporter.write_line(table[k])


@pytest.fixture(scope="session")
def unit():
    return unit_region()


@pytest.fixture(scope="session")
def ell():
    """Three level-1 cells forming an L."""
    return build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0), CellAddress(1, 0, 1)])


@pytest.fixture(scope="session")
def pair():
    return build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0)])
