import numpy as np
import pytest

from pressman.geostats import GeostatConfig
from pressman.grid import build_grid
from pressman.scenario import Scenario
from pressman.single_phase import WellSet


def small_wells(n: int) -> WellSet:
    """Injector, extractor and critical cell along the middle row of an n x n grid."""
    mid = n // 2
    return WellSet((n // 4, mid), (n - n // 3 - 1, mid), (n - n // 4, mid))


def random_perm(rng, shape, spread=1.0, mean=-9.0):
    return 10.0 ** (mean + spread * rng.standard_normal(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scenario():
    """12x12 scenario with a short horizon, cheap enough for unit tests."""
    n = 12
    return Scenario(
        grid=build_grid(n, n, 500.0, 500.0),
        wells=small_wells(n),
        geostat=GeostatConfig(correlation_length=100.0, n_modes=60, mean_log_perm=-9.0),
        horizon=2e5,
    )


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def report(number: int, passed: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
