import numpy as np
import pytest

from pointlift.scene import PointCloud, SceneSpec, Building, generate_scene
from pointlift.viewgen import CameraRig, ViewParams, lookat, intrinsics_for
from pointlift.scene import bounding_box


def make_cloud(positions, colors=None, labels=None, class_names=None) -> PointCloud:
    positions = np.asarray(positions, dtype=np.float64)
    if colors is None:
        colors = np.full((len(positions), 3), 128, dtype=np.uint8)
    return PointCloud(
        positions=positions,
        colors=np.asarray(colors, dtype=np.uint8),
        labels=None if labels is None else np.asarray(labels, dtype=np.int32),
        class_names=class_names,
    )


def grid_plane(nx=20, ny=20, extent=4.0, z=0.0):
    """Regular grid of points on a z-plane, centered at the origin."""
    xs = np.linspace(-extent / 2, extent / 2, nx)
    ys = np.linspace(-extent / 2, extent / 2, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(nx * ny, z)])


def face_on_rig(z_eye=10.0, h=64, w=64, focal=60.0, name="face") -> CameraRig:
    """Camera on the +z axis looking straight down at the origin."""
    eye = (0.0, 0.0, z_eye)
    E = lookat(eye, (0.0, 0.0, 0.0))
    K = np.array([[focal, 0, w / 2], [0, focal, h / 2], [0, 0, 1.0]])
    return CameraRig(
        name=name, kind="global", grid_i=None, grid_j=None, theta_deg=0.0,
        eye=eye, target=(0.0, 0.0, 0.0), extrinsic=E, intrinsic=K, height=h, width=w,
    )


@pytest.fixture
def two_wall_cloud():
    """Solid front plane at z=5 occluding the center of a back plane at z=2
    for a camera above at z=10. The front grid is dense enough that its 3 px
    splats leave no pinholes at the test focal length."""
    front = grid_plane(24, 24, extent=2.0, z=5.0)
    back = grid_plane(20, 20, extent=6.0, z=2.0)
    positions = np.concatenate([front, back])
    labels = np.array([0] * len(front) + [1] * len(back), dtype=np.int32)
    return make_cloud(positions, labels=labels, class_names=["front", "back"]), len(front), len(back)
