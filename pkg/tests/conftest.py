import numpy as np
import pytest

from _helpers import ACCEPTANCE_LINES
from pitreid.config import toy_config
from pitreid.data import SyntheticSpec, synthesize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_videos():
    """4 ids x 4 videos x 8 frames, 2 cameras, mild noise (in memory)."""
    samples = synthesize(SyntheticSpec(num_ids=4, videos_per_id=4, frames_per_video=8,
                                       num_cameras=2, noise=0.05, seed=0))
    frames = np.stack([s[4] for s in samples])
    ids = np.array([s[1] for s in samples])
    cams = np.array([s[2] for s in samples])
    return frames, ids, cams


@pytest.fixture
def toy_cfg():
    return toy_config()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
