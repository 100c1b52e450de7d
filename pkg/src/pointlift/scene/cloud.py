"""Point cloud data model and bounding-box computation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

# Extent floor for degenerate (flat) clouds, in meters.
EPS_BOX = 1e-6

DEFAULT_COLOR = (128, 128, 128)


@dataclass
class PointCloud:
    """N points with position, color, and optional ground-truth labels.

    positions are float64 meters, colors uint8 RGB, labels int32 indices into
    `class_names` (or None when the cloud is unlabeled). Arrays are frozen
    after construction so clouds can be shared across threads.
    """

    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ConfigError(f"positions must be (N, 3), got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ConfigError("point cloud must contain at least one point")
        if not np.isfinite(self.positions).all():
            bad = int(np.flatnonzero(~np.isfinite(self.positions).all(axis=1))[0])
            raise ConfigError(f"non-finite coordinate at point {bad}")
        if self.colors is None:
            self.colors = np.full((len(self.positions), 3), DEFAULT_COLOR, dtype=np.uint8)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
        if self.colors.shape != (len(self.positions), 3):
            raise ConfigError(f"colors must be (N, 3), got {self.colors.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (len(self.positions),):
                raise ConfigError(f"labels must be (N,), got {self.labels.shape}")
            if self.class_names is not None and len(self.labels):
                lmax = int(self.labels.max())
                if lmax >= len(self.class_names):
                    raise ConfigError(
                        f"label {lmax} out of range for {len(self.class_names)} classes"
                    )
        for arr in (self.positions, self.colors, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_points(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: origin corner, extents (W along x, L along y, H along z)."""

    origin: tuple[float, float, float]
    extents: tuple[float, float, float]

    @property
    def width(self) -> float:  # x extent
        return self.extents[0]

    @property
    def length(self) -> float:  # y extent
        return self.extents[1]

    @property
    def height(self) -> float:  # z extent
        return self.extents[2]

    @property
    def center(self) -> tuple[float, float, float]:
        return (
            self.origin[0] + self.extents[0] / 2.0,
            self.origin[1] + self.extents[1] / 2.0,
            self.origin[2] + self.extents[2] / 2.0,
        )

    @property
    def max_corner(self) -> tuple[float, float, float]:
        return (
            self.origin[0] + self.extents[0],
            self.origin[1] + self.extents[1],
            self.origin[2] + self.extents[2],
        )


def bounding_box(cloud: PointCloud, eps_box: float = EPS_BOX) -> BoundingBox:
    """Axis-aligned min/max box over all points.

    Degenerate extents (a perfectly flat cloud) are inflated to `eps_box`
    with a warning instead of rejected, so planar test scenes still process.
    """
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    ext = hi - lo
    degenerate = ext <= 0.0
    if degenerate.any():
        axes = "xyz"
        names = ",".join(axes[i] for i in np.flatnonzero(degenerate))
        warnings.warn(f"degenerate extent on axis {names}; inflating to {eps_box}")
        ext = np.where(degenerate, eps_box, ext)
    return BoundingBox(origin=tuple(lo.tolist()), extents=tuple(ext.tolist()))
