import numpy as np
import pytest

from quantarecon.core import BitVolume, RandomSource


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def random_bits(gen, shape, density=0.3) -> BitVolume:
    return BitVolume.from_array(gen.random(shape) < density)


@pytest.fixture
def rs():
    return RandomSource(2024)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
