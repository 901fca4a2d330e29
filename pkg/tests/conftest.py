import numpy as np
import pytest

from hydroddp.io import generate_prices
from hydroddp.model import (BASIN, Arc, Direction, PriceSeries, Reservoir, ReservoirNetwork,
                            two_reservoir, with_water_values)


@pytest.fixture(scope="session")
def net():
    return two_reservoir()


@pytest.fixture(scope="session")
def prices48(net):
    return with_water_values(net, generate_prices(1, 48))


def single_arc_network(vmax=1000.0, gamma=(100.0, 100.0), levels=(5.0, 5.0)):
    """Two 10 m reservoirs joined by one generating arc 0 -> 1."""
    res = (Reservoir(0, gamma[0] * 10, 0.0, 10.0, gamma[0], 50.0),
           Reservoir(1, gamma[1] * 10, 0.0, 10.0, gamma[1], 0.0))
    arc = Arc(0, 1, -0.1, -0.002, 0.0, vmax, 100.0, 0.9, Direction.GENERATE)
    return ReservoirNetwork(res, (arc,), np.array(levels))


def small_network(vmax=400.0):
    """Two reservoirs, one reversible unit between them and one to the basin;
    small enough that a few hours move the levels across the grid."""
    res = (Reservoir(0, 1000.0, 0.0, 10.0, 100.0, 60.0), Reservoir(1, 1000.0, 0.0, 10.0, 100.0, 30.0))
    arcs = (
        Arc(0, 1, -0.08, -0.0027, 0.0, vmax, 1.0, 0.9, Direction.GENERATE),
        Arc(1, 0, 0.1, -0.003, 0.0, vmax, 1.0, 0.9, Direction.PUMP),
        Arc(1, BASIN, -0.08, -0.0027, 0.0, vmax, 1.0, 0.9, Direction.GENERATE),
        Arc(BASIN, 1, 0.1, -0.003, 0.0, vmax, 1.0, 0.9, Direction.PUMP),
    )
    return ReservoirNetwork(res, arcs, np.array([5.0, 5.0]))


@pytest.fixture
def small():
    return small_network()


def synthetic(seed, T, base=0.05):
    rng = np.random.default_rng(seed)
    return PriceSeries(base + 0.02 * np.sin(2 * np.pi * np.arange(T) / 6) + rng.normal(0, 0.01, T))


# -- acceptance report -------------------------------------------------------------------
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _criteria.get((number, item.name))
    if prev is None or prev[1] == "PASS":
        _criteria[(number, item.name)] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, _), (title, status, detail) in sorted(_criteria.items()):
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
