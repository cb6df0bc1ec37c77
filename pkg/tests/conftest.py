import numpy as np
import pytest

from viodet.geometry import BBox, CameraFrame, CameraIntrinsics, Detection, Pose
from viodet.scale import default_scale_db

CHAIR = 62
COUCH = 63
DINING_TABLE = 67
OVEN = 79


@pytest.fixture(scope="session")
def db():
    return default_scale_db()


@pytest.fixture
def intr():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def upright_frame(intr, points=(), detections=(), frame_id=0, gravity=(0.0, 1.0, 0.0), pose=None, **kw):
    """Frame with the camera at the world origin looking along +z unless ``pose`` is given."""
    return CameraFrame(
        frame_id,
        float(frame_id),
        intr,
        pose or Pose.identity(),
        np.asarray(gravity, dtype=float),
        np.asarray(points, dtype=float).reshape(-1, 3),
        list(detections),
        **kw,
    )


def box_around(intr, points, pad=2.0):
    """Pixel box enclosing the projections of camera-frame ``points``."""
    pts = np.asarray(points, dtype=float)
    u = intr.fx * pts[:, 0] / pts[:, 2] + intr.cx
    v = intr.fy * pts[:, 1] / pts[:, 2] + intr.cy
    return BBox.from_corners(u.min() - pad, v.min() - pad, u.max() + pad, v.max() + pad)


def detection(label, p_l, bbox):
    return Detection(label, p_l, bbox)


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and short description")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, text = mark.args
    prev = _CRITERIA.get(n, (text, "PASS"))[1]
    if rep.failed or prev == "FAIL":
        status = "FAIL"
    elif rep.skipped:
        status = "SKIP"
    else:
        status = prev
    _CRITERIA[n] = (text, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        text, status = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {text}")
