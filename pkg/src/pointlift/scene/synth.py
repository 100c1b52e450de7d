"""Deterministic synthetic urban scene generator.

Scenes are built from flat ground (with footprints carved out), box
buildings, spherical tree canopies, box vehicles, and flat footpath strips.
Every point carries an exact ground-truth label, so generated scenes double
as oracles for end-to-end segmentation tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from .cloud import PointCloud

# Label order is fixed; class_names of a generated cloud lists only the
# kinds actually present, in this order.
CLASS_ORDER = ("ground", "footpath", "building", "tree", "vehicle")

DEFAULT_COLORS = {
    "ground": (120, 120, 110),
    "footpath": (210, 180, 60),
    "building": (160, 85, 70),
    "tree": (55, 140, 60),
    "vehicle": (40, 70, 200),
}


@dataclass(frozen=True)
class Building:
    x0: float
    y0: float
    w: float
    l: float
    h: float


@dataclass(frozen=True)
class Vehicle:
    x0: float
    y0: float
    w: float
    l: float
    h: float


@dataclass(frozen=True)
class Tree:
    cx: float
    cy: float
    cz: float  # canopy center height above ground
    r: float


@dataclass(frozen=True)
class Strip:
    x0: float
    y0: float
    w: float
    l: float


@dataclass
class SceneSpec:
    """Everything needed to generate a labeled scene, including the seed."""

    seed: int
    density: float  # points per square meter of surface
    ground: tuple[float, float, float, float] | None = None  # x0, y0, w, l
    ground_z: float = 0.0
    buildings: list[Building] = field(default_factory=list)
    trees: list[Tree] = field(default_factory=list)
    vehicles: list[Vehicle] = field(default_factory=list)
    strips: list[Strip] = field(default_factory=list)
    colors: dict[str, tuple[int, int, int]] = field(
        default_factory=lambda: dict(DEFAULT_COLORS)
    )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["buildings"] = [Building(**b) for b in d.get("buildings", [])]
        d["trees"] = [Tree(**t) for t in d.get("trees", [])]
        d["vehicles"] = [Vehicle(**v) for v in d.get("vehicles", [])]
        d["strips"] = [Strip(**s) for s in d.get("strips", [])]
        if d.get("ground") is not None:
            d["ground"] = tuple(d["ground"])
        d["colors"] = {k: tuple(v) for k, v in d.get("colors", DEFAULT_COLORS).items()}
        return cls(**d)


def _footprint(el) -> tuple[float, float, float, float]:
    return (el.x0, el.y0, el.w, el.l)


def _rects_overlap(a, b) -> bool:
    ax, ay, aw, al = a
    bx, by, bw, bl = b
    return ax < bx + bw and bx < ax + aw and ay < by + bl and by < ay + al


def _validate(spec: SceneSpec) -> None:
    if spec.density <= 0:
        raise ConfigError("density must be positive")
    n_elements = (
        (1 if spec.ground else 0)
        + len(spec.buildings) + len(spec.trees) + len(spec.vehicles) + len(spec.strips)
    )
    if n_elements == 0:
        raise ConfigError("empty scene spec: no ground and no elements")
    if spec.ground is not None and (spec.ground[2] <= 0 or spec.ground[3] <= 0):
        raise ConfigError("ground extents must be positive")
    for b in spec.buildings + spec.vehicles:
        if b.w <= 0 or b.l <= 0 or b.h <= 0:
            raise ConfigError(f"non-positive box dimensions: {b}")
    for t in spec.trees:
        if t.r <= 0:
            raise ConfigError(f"non-positive canopy radius: {t}")
    for s in spec.strips:
        if s.w <= 0 or s.l <= 0:
            raise ConfigError(f"non-positive strip dimensions: {s}")
    footprints = [_footprint(e) for e in (*spec.buildings, *spec.vehicles, *spec.strips)]
    for i in range(len(footprints)):
        for j in range(i + 1, len(footprints)):
            if _rects_overlap(footprints[i], footprints[j]):
                raise ConfigError(
                    f"overlapping footprints: {footprints[i]} vs {footprints[j]}"
                )


def _allocate(total: int, areas) -> np.ndarray:
    """Split `total` samples across faces proportionally to area.

    Largest-remainder rounding keeps the sum exact and deterministic.
    """
    areas = np.asarray(areas, dtype=np.float64)
    raw = total * areas / areas.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _sample_rect3d(rng, n, origin, e1, e2) -> np.ndarray:
    uv = rng.random((n, 2))
    return (
        np.asarray(origin, np.float64)
        + uv[:, :1] * np.asarray(e1, np.float64)
        + uv[:, 1:] * np.asarray(e2, np.float64)
    )


def _sample_ground(rng, n, rect, z, holes) -> np.ndarray:
    x0, y0, w, l = rect
    pts = np.empty((0, 2), dtype=np.float64)
    while len(pts) < n:
        batch = rng.random((max(2 * n, 1024), 2)) * np.array([w, l]) + np.array([x0, y0])
        keep = np.ones(len(batch), dtype=bool)
        for hx, hy, hw, hl in holes:
            inside = (
                (batch[:, 0] >= hx) & (batch[:, 0] < hx + hw)
                & (batch[:, 1] >= hy) & (batch[:, 1] < hy + hl)
            )
            keep &= ~inside
        pts = np.concatenate([pts, batch[keep]])
    pts = pts[:n]
    return np.column_stack([pts, np.full(n, z)])


def _box_faces(x0, y0, z0, w, l, h, include_bottom=False):
    faces = [
        ((x0, y0, z0), (w, 0, 0), (0, 0, h), w * h),          # wall y = y0
        ((x0, y0 + l, z0), (w, 0, 0), (0, 0, h), w * h),      # wall y = y0 + l
        ((x0, y0, z0), (0, l, 0), (0, 0, h), l * h),          # wall x = x0
        ((x0 + w, y0, z0), (0, l, 0), (0, 0, h), l * h),      # wall x = x0 + w
        ((x0, y0, z0 + h), (w, 0, 0), (0, l, 0), w * l),      # top
    ]
    if include_bottom:
        faces.append(((x0, y0, z0), (w, 0, 0), (0, l, 0), w * l))
    return faces


def _sample_box(rng, n, x0, y0, z0, w, l, h) -> np.ndarray:
    faces = _box_faces(x0, y0, z0, w, l, h)
    counts = _allocate(n, [f[3] for f in faces])
    parts = [
        _sample_rect3d(rng, int(c), o, e1, e2)
        for (o, e1, e2, _), c in zip(faces, counts)
        if c > 0
    ]
    return np.concatenate(parts) if parts else np.empty((0, 3))


def _sample_sphere(rng, n, center, r) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center, np.float64) + r * v


def scene_areas(spec: SceneSpec) -> dict[str, float]:
    """Analytic surface area per element kind (ground area has footprints removed)."""
    areas: dict[str, float] = {}
    carved = sum(
        e.w * e.l for e in (*spec.buildings, *spec.vehicles, *spec.strips)
    )
    if spec.ground is not None:
        areas["ground"] = spec.ground[2] * spec.ground[3] - carved
    if spec.strips:
        areas["footpath"] = sum(s.w * s.l for s in spec.strips)
    if spec.buildings:
        areas["building"] = sum(2 * (b.w + b.l) * b.h + b.w * b.l for b in spec.buildings)
    if spec.trees:
        areas["tree"] = sum(4.0 * np.pi * t.r ** 2 for t in spec.trees)
    if spec.vehicles:
        areas["vehicle"] = sum(2 * (v.w + v.l) * v.h + v.w * v.l for v in spec.vehicles)
    return areas


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labeled point cloud; bit-identical output for equal scene specs."""
    _validate(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    gz = spec.ground_z
    class_names = [c for c in CLASS_ORDER if c in scene_areas(spec)]
    class_id = {c: i for i, c in enumerate(class_names)}

    chunks: list[tuple[np.ndarray, str]] = []
    if spec.ground is not None:
        holes = [_footprint(e) for e in (*spec.buildings, *spec.vehicles, *spec.strips)]
        area = scene_areas(spec)["ground"]
        n = int(round(spec.density * area))
        chunks.append((_sample_ground(rng, n, spec.ground, gz, holes), "ground"))
    for s in spec.strips:
        n = int(round(spec.density * s.w * s.l))
        chunks.append((_sample_rect3d(rng, n, (s.x0, s.y0, gz), (s.w, 0, 0), (0, s.l, 0)), "footpath"))
    for b in spec.buildings:
        n = int(round(spec.density * (2 * (b.w + b.l) * b.h + b.w * b.l)))
        chunks.append((_sample_box(rng, n, b.x0, b.y0, gz, b.w, b.l, b.h), "building"))
    for t in spec.trees:
        n = int(round(spec.density * 4.0 * np.pi * t.r ** 2))
        chunks.append((_sample_sphere(rng, n, (t.cx, t.cy, gz + t.cz), t.r), "tree"))
    for v in spec.vehicles:
        n = int(round(spec.density * (2 * (v.w + v.l) * v.h + v.w * v.l)))
        chunks.append((_sample_box(rng, n, v.x0, v.y0, gz, v.w, v.l, v.h), "vehicle"))

    chunks = [(pts, kind) for pts, kind in chunks if len(pts)]
    if not chunks:
        raise ConfigError("scene spec produced zero points; raise the density")
    positions = np.concatenate([pts for pts, _ in chunks])
    labels = np.concatenate(
        [np.full(len(pts), class_id[kind], dtype=np.int32) for pts, kind in chunks]
    )
    colors = np.zeros((len(positions), 3), dtype=np.uint8)
    for kind, cid in class_id.items():
        colors[labels == cid] = spec.colors[kind]
    return PointCloud(positions=positions, colors=colors, labels=labels, class_names=class_names)


def demo_town(seed: int = 0, density: float = 40.0) -> SceneSpec:
    """A 30 x 30 m block with buildings, trees, vehicles, and a footpath.

    Five classes; total surface area is roughly 1800 m^2, so density sets
    the point count almost linearly (density 112 gives about 2e5 points).
    """
    return SceneSpec(
        seed=seed,
        density=density,
        ground=(0.0, 0.0, 30.0, 30.0),
        buildings=[
            Building(3.0, 3.0, 5.0, 7.0, 8.0),
            Building(20.0, 4.0, 6.0, 5.0, 6.0),
            Building(11.0, 18.0, 7.0, 6.0, 10.0),
            Building(22.0, 21.0, 5.0, 6.0, 5.0),
        ],
        trees=[
            Tree(9.0, 13.0, 3.2, 1.3),
            Tree(17.0, 5.0, 3.4, 1.4),
            Tree(5.0, 25.0, 3.5, 1.5),
            Tree(27.0, 8.0, 3.0, 1.2),
            Tree(19.0, 27.0, 3.2, 1.3),
            Tree(3.0, 15.0, 3.4, 1.4),
        ],
        vehicles=[
            Vehicle(14.0, 9.0, 2.0, 4.5, 1.6),
            Vehicle(8.0, 20.0, 2.0, 4.5, 1.6),
            Vehicle(24.0, 14.0, 4.5, 2.0, 1.6),
        ],
        strips=[Strip(12.0, 0.0, 2.0, 8.0)],
    )


def rare_strip_town(seed: int = 0, density: float = 40.0) -> SceneSpec:
    """Like demo_town but the footpath is tiny (well under 1% of all points)."""
    spec = demo_town(seed=seed, density=density)
    spec.strips = [Strip(12.0, 0.5, 1.0, 6.0)]
    return spec
