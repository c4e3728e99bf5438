import numpy as np
import pytest

from lucmodel.raster import LuGrid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_grid(rng, shape=(20, 24), categories=(0, 1, 2, 3), masked=0.0):
    data = rng.choice(np.array(categories), size=shape).astype(np.uint8)
    mask = rng.random(shape) < masked if masked else None
    return LuGrid(data, categories, 30.0, mask)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
