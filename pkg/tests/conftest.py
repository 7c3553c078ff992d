import numpy as np
import pytest

from asdseg import autograd as ad
from asdseg.data import generate_synthetic_dataset


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(48, 16, 4, seed=7)


@pytest.fixture(scope="session")
def tiny_test():
    return generate_synthetic_dataset(16, 16, 4, seed=8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from _support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
