import numpy as np
import pytest

from coec import synthetic as S
from coec.features import DepthMap, Frame, PointCloud

ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rig():
    return S.SensorRig()


@pytest.fixture(scope="session")
def scene():
    return S.generate_scene(1, 40)


@pytest.fixture(scope="session")
def frames(scene, rig):
    """Five noisy frames at 3 m spacing through a 40-primitive scene."""
    return S.make_frameset(scene, rig, S.straight_trajectory(5, start_x=0.0, spacing=3.0), seed=0)


@pytest.fixture(scope="session")
def long_scene():
    return S.generate_scene(7, 200, road_length=600.0)


def constant_depth_frame(value=0.5, width=40, height=30, points=((0.0, 0.0, 2.0),)):
    depth = DepthMap(np.full((height, width), value), np.ones((height, width), dtype=bool))
    return Frame(depth, PointCloud(np.array(points, dtype=float)))
