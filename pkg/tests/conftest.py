import math

import numpy as np
import pytest

from lidarpipe.geom import Box3D


def random_box(rng, span=20.0, cls=None, max_dim=6.0):
    return Box3D(
        cx=rng.uniform(-span, span),
        cy=rng.uniform(-span, span),
        cz=rng.uniform(0.0, 2.0),
        l=rng.uniform(0.5, max_dim),
        w=rng.uniform(0.5, max_dim),
        h=rng.uniform(0.5, 3.0),
        yaw=rng.uniform(-math.pi, math.pi),
        class_id=int(rng.integers(3)) if cls is None else cls,
        score=float(rng.uniform(0.0, 1.0)),
    )


def shapely_bev_iou(a: Box3D, b: Box3D) -> float:
    """Independent exact oracle for the rotated-rectangle IoU."""
    from shapely.geometry import Polygon

    pa = Polygon(a.corners_bev())
    pb = Polygon(b.corners_bev())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def raster_bev_iou(a: Box3D, b: Box3D, resolution=2000) -> float:
    """Rasterization oracle: sample a dense grid over the joint bounding box
    and count cell centers inside each footprint."""
    corners = np.vstack([a.corners_bev(), b.corners_bev()])
    lo = corners.min(axis=0) - 1e-6
    hi = corners.max(axis=0) + 1e-6
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    def inside(box):
        dx, dy = gx - box.cx, gy - box.cy
        c, s = math.cos(-box.yaw), math.sin(-box.yaw)
        lx = c * dx - s * dy
        ly = s * dx + c * dy
        return (np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)

    ia, ib = inside(a), inside(b)
    inter = np.count_nonzero(ia & ib)
    union = np.count_nonzero(ia | ib)
    return inter / union if union else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion, printed after the test run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
