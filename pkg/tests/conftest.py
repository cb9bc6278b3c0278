import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "mixclass", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("mixclass")

# classification matrix and category probabilities of the ordinal scenario
ORDINAL_P = np.array([[0.80, 0.15, 0.05], [0.10, 0.70, 0.20], [0.05, 0.15, 0.80]])
ORDINAL_PI = np.array([0.2, 0.3, 0.5])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_stochastic(rng, k, floor=0.02):
    """Random row-stochastic k x k matrix with entries bounded away from 0."""
    m = rng.dirichlet(np.ones(k), size=k)
    m = floor + (1 - k * floor) * m
    return m / m.sum(axis=1, keepdims=True)


# verdict lines appended by the acceptance tests
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
