import numpy as np
import pytest

from projfilter.expfam import BijectionParams, build_basis, gaussian_to_natural
from projfilter.posterior import example_a_model, make_posterior
from projfilter.quadrature import unbounded_grid

_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it at the end of the run."""

    def report(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}"
        request.config.stash[_CRITERIA].append(line)
        print(line)
        return passed

    return report


@pytest.fixture(scope="session")
def grid1():
    return unbounded_grid(1, 6)


@pytest.fixture(scope="session")
def grid2():
    return unbounded_grid(2, 6)


@pytest.fixture(scope="session")
def example_a_spec(grid2):
    basis = build_basis(2, 4)
    mu, Sigma = np.ones(2), np.eye(2)
    theta0 = gaussian_to_natural(basis, mu, Sigma)
    return make_posterior(basis, theta0, BijectionParams.from_gaussian(mu, Sigma), np.zeros(2), example_a_model(), grid2)
