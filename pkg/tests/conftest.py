import numpy as np
import pytest

from gsinpaint.scene import Camera, GaussianScene
from gsinpaint.synthetic import SceneSpec, generate_dataset, generate_scene

# acceptance lines collected by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def axis_camera(width=64, height=64, focal=100.0):
    """Camera at the origin looking down +z with the principal point at the image centre."""
    return Camera(np.eye(3), np.zeros(3), (focal, focal), ((width - 1) / 2, (height - 1) / 2), (width, height))


def one_gaussian(position, scale=0.05, color=(1.0, 0.0, 0.0), opacity=0.5, dtype=np.float64):
    sc = GaussianScene.zeros(1, dtype=dtype)
    sc.positions[0] = position
    sc.log_scales[0] = np.log(scale)
    sc.colors[0] = color
    sc.opacity_logits[0] = np.log(opacity / (1 - opacity))
    return sc


SMALL_SPEC = SceneSpec(seed=5, width=32, height=32, n_views=4, n_test_views=2)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_scene(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_dataset(small_scenes):
    return generate_dataset(SMALL_SPEC, small_scenes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
