import numpy as np
import pytest

from fedmor.federation import ProtocolConfig, prepare_clients
from fedmor.synthdata import WorldSpec, generate_world


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldSpec(seed=0))


@pytest.fixture(scope="session")
def default_artifacts(default_world):
    return prepare_clients(default_world, ProtocolConfig(), seed=0)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldSpec(num_clients=2, pairs_per_client=200, public_query_count=40, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
