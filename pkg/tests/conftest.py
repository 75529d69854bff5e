import numpy as np
import pytest

from flowguide.kinematics import RobotState, exp_so3

CRITERIA_LINES = {}


def record_criterion(number, passed, detail):
    CRITERIA_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gripper_state():
    return RobotState(position=np.array([0.1, -0.05, 0.3]), rotation=exp_so3(np.array([0.2, 1.1, -0.3])))
