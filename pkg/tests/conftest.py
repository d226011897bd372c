import numpy as np
import pytest

from risam import geometry as geo


def random_pose2(rng, scale=5.0):
    return geo.Pose2(*rng.uniform(-scale, scale, 2), rng.uniform(-np.pi, np.pi))


def random_pose3(rng, scale=5.0):
    q = rng.normal(size=4)
    return geo.Pose3(tuple(q / np.linalg.norm(q)), tuple(rng.uniform(-scale, scale, 3)))


def random_pose(rng, group, scale=5.0):
    return random_pose2(rng, scale) if group is geo.SE2 else random_pose3(rng, scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(n, ok, detail):
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
