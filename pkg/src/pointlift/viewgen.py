"""Virtual camera rig generation.

Builds the global and local view families around a scene bounding box:
a single global anchor above the box center with cameras orbiting it, and
a K x K grid of local anchors with their own orbits. Field of view is sized
from a virtual nadir camera at each anchor so the intended region (whole
scene or one grid cell) fits the image.

Conventions (fixed here, relied on everywhere downstream):
  * world is z-up; heights are measured from the box origin z0
  * extrinsics are world-to-camera; the camera looks along +z,
    image x right, image y down
  * lookat up-hint is world +z, falling back to +y for near-vertical views
  * square pixels; FoV is bound to the min(h, w) image dimension
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scene import BoundingBox
from .seeding import rng_for

UP_FALLBACK_DOT = 1.0 - 1e-6


@dataclass(frozen=True)
class ViewParams:
    """Knobs of the view generator.

    grid_k: local anchor grid granularity (K x K anchors)
    angle_step_deg: angular interval between cameras on an orbit; divides 360
    radius_div: local orbit radius divisor (smaller value -> wider orbit)
    """

    grid_k: int = 4
    angle_step_deg: int = 90
    radius_div: float = 0.5
    seed: int = 0
    height: int = 512
    width: int = 512

    def __post_init__(self):
        if self.grid_k < 1:
            raise ConfigError(f"grid_k must be >= 1, got {self.grid_k}")
        if self.angle_step_deg <= 0 or 360 % self.angle_step_deg != 0:
            raise ConfigError(f"angle_step_deg must divide 360, got {self.angle_step_deg}")
        if self.radius_div <= 0:
            raise ConfigError(f"radius_div must be > 0, got {self.radius_div}")
        if self.height < 16 or self.width < 16:
            raise ConfigError("image size must be at least 16 x 16")

    @property
    def views_per_orbit(self) -> int:
        return 360 // self.angle_step_deg


@dataclass(frozen=True)
class CameraRig:
    """One virtual camera: pose, intrinsics, and provenance."""

    name: str                 # stable id, e.g. "g000" or "l2_3_001"
    kind: str                 # "global" | "local"
    grid_i: int | None
    grid_j: int | None
    theta_deg: float
    eye: tuple[float, float, float]
    target: tuple[float, float, float]
    extrinsic: np.ndarray     # 4x4 world-to-camera
    intrinsic: np.ndarray     # 3x3
    height: int
    width: int

    def __post_init__(self):
        E = np.asarray(self.extrinsic, dtype=np.float64)
        K = np.asarray(self.intrinsic, dtype=np.float64)
        if E.shape != (4, 4) or K.shape != (3, 3):
            raise ConfigError("extrinsic must be 4x4 and intrinsic 3x3")
        R = E[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ConfigError(f"rotation block of {self.name} is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        E.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "extrinsic", E)
        object.__setattr__(self, "intrinsic", K)


def lookat(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera extrinsic with the camera at `eye` looking at `target`.

    Camera frame: x right, y down, z forward (right-handed). When the view
    direction is parallel to the up hint, +y is used instead.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    f = target - eye
    norm = np.linalg.norm(f)
    if norm == 0.0:
        raise ConfigError("lookat eye and target coincide")
    f = f / norm
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if abs(float(f @ up)) > UP_FALLBACK_DOT:
        up = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    E = np.eye(4)
    E[0, :3], E[1, :3], E[2, :3] = r, d, f
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def _fov_to_intrinsic(fov_rad: float, h: int, w: int) -> np.ndarray:
    if fov_rad >= math.radians(179.0):
        raise ConfigError(f"degenerate geometry: field of view {math.degrees(fov_rad):.1f} deg")
    focal = (min(h, w) / 2.0) / math.tan(fov_rad / 2.0)
    return np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])


def global_fov(box: BoundingBox) -> float:
    """FoV that spans the scene diagonal from the global anchor height."""
    W, L, H = box.extents
    return 2.0 * math.atan((math.hypot(L, W) / 2.0) / (H + math.sqrt(L * W)))


def local_fov(box: BoundingBox, grid_k: int) -> float:
    """FoV that spans one grid cell diagonal from the local anchor height."""
    W, L, H = box.extents
    cell_diag = math.hypot(W / grid_k, L / grid_k)
    d_local = H + math.sqrt(L * W) / (2.0 * grid_k)
    return 2.0 * math.atan((cell_diag / 2.0) / d_local)


def intrinsics_for(rig_kind: str, box: BoundingBox, params: ViewParams) -> np.ndarray:
    """3x3 intrinsics for one rig family ("global" or "local")."""
    if rig_kind == "global":
        fov = global_fov(box)
    elif rig_kind == "local":
        fov = local_fov(box, params.grid_k)
    else:
        raise ConfigError(f"unknown rig kind {rig_kind!r}")
    return _fov_to_intrinsic(fov, params.height, params.width)


def _orbit(center_xy, radius, z, theta_deg):
    t = math.radians(theta_deg)
    return (center_xy[0] + radius * math.cos(t), center_xy[1] + radius * math.sin(t), z)


def global_rigs(box: BoundingBox, params: ViewParams) -> list[CameraRig]:
    """Cameras orbiting the global anchor above the box center."""
    W, L, H = box.extents
    z0 = box.origin[2]
    c_x, c_y, _ = box.center
    s = math.sqrt(L * W)
    anchor_z = z0 + H + s
    radius = s / 4.0
    target = (c_x, c_y, z0 + (H + s) / 2.0)
    K = intrinsics_for("global", box, params)
    theta0 = float(rng_for(params.seed, "viewgen", "global").uniform(0.0, params.angle_step_deg))
    rigs = []
    for k in range(params.views_per_orbit):
        theta = theta0 + k * params.angle_step_deg
        eye = _orbit((c_x, c_y), radius, anchor_z, theta)
        rigs.append(
            CameraRig(
                name=f"g{k:03d}", kind="global", grid_i=None, grid_j=None,
                theta_deg=theta, eye=eye, target=target,
                extrinsic=lookat(eye, target), intrinsic=K,
                height=params.height, width=params.width,
            )
        )
    return rigs


def local_rigs(box: BoundingBox, params: ViewParams) -> list[CameraRig]:
    """Cameras orbiting each of the K x K interior grid anchors."""
    W, L, H = box.extents
    x0, y0, z0 = box.origin
    k_grid = params.grid_k
    s = math.sqrt(L * W)
    anchor_z = z0 + H + s / (2.0 * k_grid)
    radius = s / (params.radius_div * k_grid)
    K = intrinsics_for("local", box, params)
    rigs = []
    for i in range(1, k_grid + 1):
        for j in range(1, k_grid + 1):
            ax = x0 + i * W / (k_grid + 1)
            ay = y0 + j * L / (k_grid + 1)
            # target at mid-height of the scene below the anchor, so cameras
            # look obliquely down into their own cell
            target = (ax, ay, z0 + H / 2.0)
            theta0 = float(
                rng_for(params.seed, "viewgen", "local", i, j).uniform(0.0, params.angle_step_deg)
            )
            for k in range(params.views_per_orbit):
                theta = theta0 + k * params.angle_step_deg
                eye = _orbit((ax, ay), radius, anchor_z, theta)
                rigs.append(
                    CameraRig(
                        name=f"l{i}_{j}_{k:03d}", kind="local", grid_i=i, grid_j=j,
                        theta_deg=theta, eye=eye, target=target,
                        extrinsic=lookat(eye, target), intrinsic=K,
                        height=params.height, width=params.width,
                    )
                )
    return rigs


def all_rigs(box: BoundingBox, params: ViewParams) -> list[CameraRig]:
    """Global family followed by the local families; 360/A * (1 + K^2) rigs."""
    return global_rigs(box, params) + local_rigs(box, params)


def rigs_to_json(rigs: list[CameraRig]) -> str:
    doc = [
        {
            "id": r.name,
            "kind": r.kind,
            "i": r.grid_i,
            "j": r.grid_j,
            "theta_deg": r.theta_deg,
            "eye": list(r.eye),
            "target": list(r.target),
            "E": np.asarray(r.extrinsic).reshape(-1).tolist(),
            "I": np.asarray(r.intrinsic).reshape(-1).tolist(),
            "h": r.height,
            "w": r.width,
        }
        for r in rigs
    ]
    return json.dumps(doc, indent=1)


def rigs_from_json(text: str) -> list[CameraRig]:
    rigs = []
    for d in json.loads(text):
        rigs.append(
            CameraRig(
                name=d["id"], kind=d["kind"], grid_i=d["i"], grid_j=d["j"],
                theta_deg=d["theta_deg"], eye=tuple(d["eye"]), target=tuple(d["target"]),
                extrinsic=np.array(d["E"], dtype=np.float64).reshape(4, 4),
                intrinsic=np.array(d["I"], dtype=np.float64).reshape(3, 3),
                height=d["h"], width=d["w"],
            )
        )
    return rigs
