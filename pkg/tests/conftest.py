import numpy as np
import pytest
from hypothesis import settings

from projflow.mesh import generate_structured
from projflow.scheme import Discretization

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def disc2():
    """Taylor-Hood on the 8-triangle unit-square mesh."""
    return Discretization.taylor_hood(generate_structured(2, 2))


@pytest.fixture(scope="session")
def disc4():
    return Discretization.taylor_hood(generate_structured(4, 4))


@pytest.fixture(scope="session")
def disc8():
    return Discretization.taylor_hood(generate_structured(8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
