import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from genservo import learning as L
from genservo import simulator as sim

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ur5():
    return sim.make_world("ur5_sim")


@pytest.fixture(scope="session")
def ur5_clean():
    return sim.make_world("ur5_sim", noise={"pixel_sigma": 0.0, "controller_sigma": 0.0})


@pytest.fixture(scope="session")
def learned_ur5(ur5):
    """Full pipeline on 50 noisy random-walk samples; shared by inference and adaptation tests."""
    data = sim.collect_random(ur5, 50, seed=0)
    return L.learn_pipeline(data, L.WorldHints.from_world(ur5), L.LearnConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
