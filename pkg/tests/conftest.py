import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sepuq.kle import CovarianceSpec, build_kl_basis
from sepuq.mesh import build_mesh

settings.register_profile("sepuq", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sepuq")

ACCEPTANCE_LINES = []


def poisson_series(x, y, terms=199):
    """Series solution of -lap u = 1 on the unit square with zero boundary values."""
    k = np.arange(1, terms + 1, 2)
    m, n = np.meshgrid(k, k, indexing="ij")
    coef = 16.0 / (np.pi**4 * m * n * (m**2 + n**2))
    x = np.atleast_1d(x)[:, None, None]
    y = np.atleast_1d(y)[:, None, None]
    return (coef * np.sin(m * np.pi * x) * np.sin(n * np.pi * y)).sum((1, 2))


@pytest.fixture(scope="session")
def mesh10():
    return build_mesh(10, 10)


@pytest.fixture(scope="session")
def basis10(mesh10):
    return build_kl_basis(mesh10, CovarianceSpec(), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
