import numpy as np
import pytest

from tofjoint.geometry import CameraIntrinsics
from tofjoint.scenegen import Plane, SceneSpec, Sphere

ACCEPTANCE = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Store and print one acceptance line; the terminal summary repeats them."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_k():
    return CameraIntrinsics(40.0, 40.0, 19.5, 14.5, 40, 30)


@pytest.fixture
def sphere_scene():
    return SceneSpec((Sphere((30.0, 0.0, 650.0), 120.0),), Plane((0.35, 0.1, -1.0), -800.0), rng_seed=0)
