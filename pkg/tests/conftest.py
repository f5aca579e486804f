import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest

from plenocal.model import Checkerboard, Pose
from plenocal.presets import r12_like, upc_like


@pytest.fixture(scope="session")
def r12():
    return r12_like()


@pytest.fixture(scope="session")
def upc():
    return upc_like()


@pytest.fixture
def board():
    return Checkerboard(5, 6, 3.0)


@pytest.fixture
def facing_pose(board):
    """Fronto-parallel board centred on the optical axis at 350 mm."""
    return Pose(np.eye(3), np.array([0.0, 0.0, 350.0]) - board.centre())


def pytest_configure(config):
    config.acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = getattr(config, "acceptance_verdicts", [])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for line in verdicts:
        terminalreporter.write_line(line)
