import numpy as np
import pytest

from hormarkov.noise import GaussianLaw, UniformBallLaw, UniformMixtureLaw


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def gaussian():
    return GaussianLaw()


@pytest.fixture(scope="session")
def ball():
    return UniformBallLaw()


@pytest.fixture(scope="session")
def mixture():
    return UniformMixtureLaw()


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
