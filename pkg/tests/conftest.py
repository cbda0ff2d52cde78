"""Session-wide Monte Carlo grids shared by the simulation and acceptance tests."""

import pytest

from elfusion.parallel import default_threads
from elfusion.simulation import ScenarioConfig, run_monte_carlo

GRID_N1 = (200, 600)
GRID_RATIO = (0.75, 1.5, 5.0)
REPLICATES = 1000
GLM_SEED = 20240601
CAUSAL_SEED = 20240602


class _LazyGrid:
    """Runs each grid point on first access and keeps the table."""

    def __init__(self, kind, seed, estimators):
        self.kind, self.seed, self.estimators = kind, seed, estimators
        self._tables = {}

    def __getitem__(self, key):
        if key not in self._tables:
            n1, ratio = key
            cfg = ScenarioConfig(self.kind, n1, ratio, REPLICATES, self.seed, self.estimators)
            self._tables[key] = run_monte_carlo(cfg, threads=default_threads())
        return self._tables[key]

    def points(self):
        return [(n1, r) for n1 in GRID_N1 for r in GRID_RATIO]


@pytest.fixture(scope="session")
def glm_grid():
    return _LazyGrid("glm", GLM_SEED, ("MLE", "IB_New", "IB_GIM"))


@pytest.fixture(scope="session")
def causal_grid():
    return _LazyGrid("causal", CAUSAL_SEED, ("IPTW", "IB_IPTW"))


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
