"""Software point-splat rasterizer with Z-buffering.

Each point is transformed to camera space, culled at the near plane,
projected through the pinhole model, and splatted as a small square. Per
pixel the smallest camera-space depth wins; ties break to the lower point
index so parallel and sequential rendering agree bit-for-bit.

Depth maps are float32 end to end (memory and disk share the same values),
so validity checks behave identically whether a view was just rendered or
reloaded from its bundle. Projection depths are cast to float32 before being
compared against the map.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError
from .scene import PointCloud
from .viewgen import CameraRig

Z_NEAR = 1e-3
NONE_INDEX = np.uint32(0xFFFFFFFF)


@dataclass
class RenderedView:
    """RGB, depth, and point-index maps for one rig."""

    rig_name: str
    rgb: np.ndarray          # (h, w, 3) uint8
    depth: np.ndarray        # (h, w) float32, +inf where empty
    point_index: np.ndarray  # (h, w) uint32, NONE_INDEX where empty

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def camera_space(positions: np.ndarray, rig: CameraRig) -> np.ndarray:
    """World positions (N, 3) to camera coordinates (N, 3)."""
    R = rig.extrinsic[:3, :3]
    t = rig.extrinsic[:3, 3]
    return positions @ R.T + t


def project_points(positions: np.ndarray, rig: CameraRig):
    """Continuous pixel coordinates and depths for a batch of points.

    Returns (u, v, z) float64 arrays; callers decide in-view filtering.
    """
    cam = camera_space(positions, rig)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rig.intrinsic[0, 0] * (cam[:, 0] / z) + rig.intrinsic[0, 2]
        v = rig.intrinsic[1, 1] * (cam[:, 1] / z) + rig.intrinsic[1, 2]
    return u, v, z


def in_view_mask(u, v, z, rig: CameraRig, z_near: float = Z_NEAR) -> np.ndarray:
    return (z > z_near) & (u >= 0) & (u < rig.width) & (v >= 0) & (v < rig.height)


def project_point(p, rig: CameraRig, z_near: float = Z_NEAR):
    """Project one point; returns (u, v, depth) or None when out of view."""
    u, v, z = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), rig)
    if not in_view_mask(u, v, z, rig, z_near)[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def unproject(u: float, v: float, depth: float, rig: CameraRig) -> np.ndarray:
    """Inverse of project_point for a given pixel and camera-space depth."""
    K = rig.intrinsic
    cam = np.array(
        [(u - K[0, 2]) / K[0, 0] * depth, (v - K[1, 2]) / K[1, 1] * depth, depth]
    )
    R = rig.extrinsic[:3, :3]
    t = rig.extrinsic[:3, 3]
    return R.T @ (cam - t)


def rasterize(
    cloud: PointCloud, rig: CameraRig, splat_px: int = 3, z_near: float = Z_NEAR
) -> RenderedView:
    """Render one view. splat_px must be odd; 1 disables splatting."""
    if splat_px < 1 or splat_px % 2 == 0:
        raise ConfigError(f"splat_px must be odd and >= 1, got {splat_px}")
    h, w = rig.height, rig.width
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    depth = np.full((h, w), np.inf, dtype=np.float32)
    index = np.full((h, w), NONE_INDEX, dtype=np.uint32)

    u, v, z = project_points(cloud.positions, rig)
    vis = in_view_mask(u, v, z, rig, z_near)
    if not vis.any():
        return RenderedView(rig.name, rgb, depth, index)
    px = np.floor(u[vis]).astype(np.int64)
    py = np.floor(v[vis]).astype(np.int64)
    zs = z[vis]
    ids = np.flatnonzero(vis).astype(np.int64)

    r = splat_px // 2
    if r > 0:
        off = np.arange(-r, r + 1)
        dx, dy = np.meshgrid(off, off, indexing="xy")
        px = (px[:, None] + dx.ravel()[None, :]).ravel()
        py = (py[:, None] + dy.ravel()[None, :]).ravel()
        zs = np.repeat(zs, splat_px * splat_px)
        ids = np.repeat(ids, splat_px * splat_px)
        inb = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        px, py, zs, ids = px[inb], py[inb], zs[inb], ids[inb]
        if len(px) == 0:
            return RenderedView(rig.name, rgb, depth, index)

    flat = py * w + px
    order = np.lexsort((ids, zs))  # ascending depth, then index
    flat_sorted = flat[order]
    # first occurrence per pixel in (depth, index) order = the winner
    pix, first = np.unique(flat_sorted, return_index=True)
    win = order[first]
    depth.reshape(-1)[pix] = zs[win].astype(np.float32)
    index.reshape(-1)[pix] = ids[win].astype(np.uint32)
    rgb.reshape(-1, 3)[pix] = cloud.colors[ids[win]]
    return RenderedView(rig.name, rgb, depth, index)


def render_views(
    cloud: PointCloud,
    rigs: list[CameraRig],
    splat_px: int = 3,
    threads: int = 1,
    z_near: float = Z_NEAR,
) -> list[RenderedView]:
    """Render all rigs; views are independent, so thread count never changes bits."""
    if threads <= 1:
        return [rasterize(cloud, rig, splat_px, z_near) for rig in rigs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda rig: rasterize(cloud, rig, splat_px, z_near), rigs))


def valid_projection_mask(
    cloud: PointCloud, view: RenderedView, rig: CameraRig, eps_rel: float,
    z_near: float = Z_NEAR,
):
    """Per-point depth-consistency test against one view's Z-buffer.

    A point passes when its projected pixel is in bounds, the depth map is
    finite there, and |z - depth| <= eps_rel * z with z quantized to the
    map's float32 precision. Returns (mask, px, py) with px/py valid only
    where mask is True.
    """
    u, v, z = project_points(cloud.positions, rig)
    vis = in_view_mask(u, v, z, rig, z_near)
    px = np.zeros(len(u), dtype=np.int64)
    py = np.zeros(len(u), dtype=np.int64)
    px[vis] = np.floor(u[vis]).astype(np.int64)
    py[vis] = np.floor(v[vis]).astype(np.int64)
    mask = np.zeros(len(u), dtype=bool)
    if vis.any():
        d = view.depth[py[vis], px[vis]].astype(np.float64)
        z32 = z[vis].astype(np.float32).astype(np.float64)
        ok = np.isfinite(d) & (np.abs(z32 - d) <= eps_rel * z32)
        mask[np.flatnonzero(vis)[ok]] = True
    return mask, px, py


def coverage_ratio(
    cloud: PointCloud,
    views: list[RenderedView],
    rigs: list[CameraRig],
    eps_rel: float = 1e-2,
):
    """Fraction of points observed by at least one depth-consistent projection.

    Returns (ratio, covered) where covered is the per-point membership bitmap.
    """
    covered = np.zeros(len(cloud), dtype=bool)
    for view, rig in zip(views, rigs):
        mask, _, _ = valid_projection_mask(cloud, view, rig, eps_rel)
        covered |= mask
    ratio = float(covered.mean()) if len(views) else 0.0
    return ratio, covered


# --- view bundle files -------------------------------------------------------

def _write_map(path: Path, arr: np.ndarray, dtype: str) -> None:
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_map(path: Path, dtype: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", raw)
    need = 8 + h * w * np.dtype(dtype).itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: expected {need} bytes for {h}x{w}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, count=h * w, offset=8).reshape(h, w).copy()


def save_view(view: RenderedView, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(view.rgb).save(out / f"view_{view.rig_name}.png")
    _write_map(out / f"view_{view.rig_name}.depth", view.depth, "<f4")
    _write_map(out / f"view_{view.rig_name}.idx", view.point_index, "<u4")


def load_view(view_dir, rig_name: str) -> RenderedView:
    d = Path(view_dir)
    rgb = np.asarray(Image.open(d / f"view_{rig_name}.png").convert("RGB"))
    depth = _read_map(d / f"view_{rig_name}.depth", "<f4")
    index = _read_map(d / f"view_{rig_name}.idx", "<u4")
    if rgb.shape[:2] != depth.shape or depth.shape != index.shape:
        raise FormatError(f"view {rig_name}: png/depth/idx shapes disagree")
    return RenderedView(rig_name, rgb, depth, index)
