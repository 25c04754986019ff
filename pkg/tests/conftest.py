import numpy as np
import pytest

from layerscope.volume import PhantomSpec, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def flat_phantom():
    spec = PhantomSpec(dims=(32, 128, 4), pit_depth=0.0, undulation=0.0)
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def reference_phantom():
    return generate_phantom(PhantomSpec())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
