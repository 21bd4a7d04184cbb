import sys

import numpy as np
import pytest

from plc3d.geom import CameraView, PointScene
from plc3d.synth import SceneCategory, SceneConfig, generate_scene, look_at


def make_view(position=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0), width=64, height=48, f=50.0, depth=None, up=(0.0, -1.0, 0.0)):
    k = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    ext = look_at(position, target, up=up)
    if depth is None:
        depth = np.zeros((height, width), dtype=np.float32)
    elif np.isscalar(depth):
        depth = np.full((height, width), depth, dtype=np.float32)
    return CameraView(k, ext, width, height, depth)


def make_scene(points, view, labels=None, scene_id="toy"):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    return PointScene(points, np.full((n, 3), 0.5), labels, [view], scene_id)


TOY_CATEGORIES = [
    SceneCategory("chair", "large", True, "box", (0.8, 0.2, 0.2)),
    SceneCategory("sofa", "large", True, "box", (0.2, 0.3, 0.8)),
    SceneCategory("lamp", "small", False, "cylinder", (0.9, 0.9, 0.2)),
    SceneCategory("plant", "small", False, "sphere", (0.1, 0.4, 0.1)),
]


@pytest.fixture(scope="session")
def toy_cfg():
    return SceneConfig(
        categories=TOY_CATEGORIES,
        object_count_range=(3, 5),
        points_per_m2=8,
        object_density_scale=8,
        view_count=3,
        image_size=(96, 72),
        seed=11,
    )


@pytest.fixture(scope="session")
def toy_scene(toy_cfg):
    return generate_scene(toy_cfg)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.format_line(n))
