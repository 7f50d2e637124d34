import numpy as np
import pytest

from trajsim.geometry import CArmPose
from trajsim.phantom import build_chest_phantom


@pytest.fixture
def small_pose():
    """Coarse 32 x 32 detector with the default field of view."""
    return CArmPose(0.0, 90.0, det_rows=32, det_cols=32, pitch_mm=8.0)


@pytest.fixture
def ci_pose():
    """64 x 64 detector at 4 mm pitch; same field of view as the default."""
    return CArmPose(0.0, 90.0, det_rows=64, det_cols=64, pitch_mm=4.0)


@pytest.fixture(scope="session")
def chest1():
    return build_chest_phantom(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
