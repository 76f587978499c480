import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from volcap.camera import Camera, Intrinsics, Pose
from volcap.depthfilter import DepthMap, GuidanceImage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def basic_intrinsics():
    return Intrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def identity_camera(basic_intrinsics):
    return Camera("cam00", basic_intrinsics, Pose.identity())


def random_depth_scene(rng, h=24, w=24, valid_fraction=0.8):
    """A random depth/guide pair with holes, for filter tests."""
    vals = rng.uniform(1.0, 3.0, (h, w))
    valid = rng.random((h, w)) < valid_fraction
    vals = np.where(valid, vals, 0.0)
    guide = rng.random((h, w, 3))
    return DepthMap(vals, valid), GuidanceImage(guide)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from volcap.camera import quat_to_matrix

    return quat_to_matrix(q)
