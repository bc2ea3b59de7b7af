import numpy as np
import pytest

from spi.geometry import build_detector
from spi.pipeline import desk_geometry
from spi.simulate import PhantomParams, make_phantom, make_truth


@pytest.fixture(scope="session")
def tiny_det():
    """13x13 detector on a 17^3 grid."""
    return build_detector(desk_geometry(17), grid_size=17)


@pytest.fixture(scope="session")
def tiny_phantom():
    return make_phantom(PhantomParams(outer_radius=3.0, shell_thickness=(0.75, 0.75), gap=0.5), 17)


@pytest.fixture(scope="session")
def tiny_truth(tiny_phantom, tiny_det):
    return make_truth(tiny_phantom, tiny_det)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()
NUM_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record(request):
    """``record(k, passed, detail)`` stores one acceptance line for the terminal summary."""
    store = request.config.stash[ACCEPTANCE]

    def _record(k: int, passed: bool, detail: str) -> bool:
        store[k] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, NUM_CRITERIA + 1):
        if k in store:
            passed, detail = store[k]
            terminalreporter.write_line(f"ACCEPTANCE {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE {k:2d}: FAIL  (not evaluated)")
