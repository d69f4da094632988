import numpy as np
import pytest

from artipose.geometry import CameraIntrinsics, Correspondences, RigidMotion
from artipose.kinematics import rotation_about_axis


@pytest.fixture
def cam() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=110.0, cx=64.0, cy=48.0, width=128, height=96)


def random_motion(rng: np.random.Generator, max_angle_rad: float = 0.45) -> RigidMotion:
    """Random rigid motion with a unit translation and a bounded rotation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.02, max_angle_rad)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    return RigidMotion(rotation_about_axis(axis, angle), t, scale_known=False)


def exact_correspondences(
    rng: np.random.Generator,
    motion: RigidMotion,
    cam: CameraIntrinsics,
    n: int = 20,
    scale: float = 1.0,
) -> tuple[Correspondences, np.ndarray]:
    """Project random front-of-both-views 3-D points under an exact motion.

    Returns the correspondences and the frame-k points.  ``scale`` applies
    to the translation (the motion itself may be unit-norm).
    """
    points = []
    while len(points) < n:
        x = rng.uniform(-2.5, 2.5)
        y = rng.uniform(-2.0, 2.0)
        z = rng.uniform(4.0, 8.0)
        p = np.array([x, y, z])
        p2 = motion.rotation @ p + scale * motion.translation
        if p2[2] > 0.5:
            points.append(p)
    pts = np.array(points)
    moved = pts @ motion.rotation.T + scale * motion.translation
    return Correspondences(cam.project(pts), cam.project(moved)), pts
