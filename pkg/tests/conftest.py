import numpy as np
import pytest

from epimatch.geometry import CameraView
from epimatch.synthetic import generate, look_at


def brute_raster(line, thickness, width, height):
    """Every pixel whose center is within thickness/2 of the line."""
    a, b, c = line
    ys, xs = np.mgrid[0:height, 0:width]
    return np.abs(a * (xs + 0.5) + b * (ys + 0.5) + c) <= thickness / 2.0


def random_camera(rng, view_id, size, distance=3.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    R, t = look_at(distance * d, up=(0.0, 0.0, 1.0) if abs(d[2]) < 0.9 else (1.0, 0.0, 0.0))
    f = rng.uniform(0.8, 1.5) * size
    K = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    return CameraView(view_id, K, R, t, size, size)


def rectified_pair(size=64, f=50.0, baseline=0.5):
    K = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    c0 = CameraView(0, K, np.eye(3), np.zeros(3), size, size)
    c1 = CameraView(1, K, np.eye(3), np.array([-baseline, 0.0, 0.0]), size, size)
    return c0, c1


@pytest.fixture(scope="session")
def small_scene():
    return generate(4, 5, seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
