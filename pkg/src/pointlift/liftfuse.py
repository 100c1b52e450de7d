"""Lift per-mask 2D features onto 3D points and fuse them across views.

Per view: every point is projected into the image; projections that land on
a finite Z-buffer entry with consistent depth pick up the mask id at their
pixel. Mask id 0 (background) assigns nothing.

Sample balancing then caps over-populated masks: per view, the threshold tau
is the mean size of the k smallest non-empty masks; those k masks are kept
whole, and any other mask larger than tau is down-sampled (seeded, without
replacement) to floor(tau) projections.

Fusion averages, per point, the mask features of all retained projections in
ascending view order (so thread scheduling cannot change bits) and
re-normalizes. Points that retain no projection are uncovered and carry a
zero feature vector.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .render import RenderedView, valid_projection_mask
from .scene import PointCloud
from .seeding import rng_for
from .viewgen import CameraRig
from .vlmio import MaskSet

OU3F_MAGIC = b"OU3F"
DEFAULT_EPS_REL = 1e-2


@dataclass(frozen=True)
class SbffParams:
    """Sample-balanced fusion knobs: top-k count for tau, on/off, seed."""

    k: int = 5
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"sbff k must be >= 1, got {self.k}")


@dataclass
class ViewProjections:
    """Valid (point, mask) assignments for one view."""

    rig_name: str
    point_ids: np.ndarray  # int64, ascending
    mask_ids: np.ndarray   # int64, >= 1


@dataclass
class FeatureLibrary:
    """Fused per-point 2D features: the teacher signal for distillation."""

    covered: np.ndarray     # (N,) bool
    features: np.ndarray    # (N, C) float32; unit rows where covered, zeros elsewhere
    view_count: np.ndarray  # (N,) uint32

    def __post_init__(self):
        self.covered = np.ascontiguousarray(self.covered, dtype=bool)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.view_count = np.ascontiguousarray(self.view_count, dtype=np.uint32)
        n = len(self.covered)
        if len(self.features) != n or len(self.view_count) != n:
            raise ConfigError("covered/features/view_count lengths disagree")
        if bool((self.covered != (self.view_count >= 1)).any()):
            raise ConfigError("covered flag must equal view_count >= 1")
        if (~self.covered).any() and np.abs(self.features[~self.covered]).max(initial=0.0) != 0.0:
            raise ConfigError("uncovered points must carry zero features")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def valid_projections(
    cloud: PointCloud,
    view: RenderedView,
    rig: CameraRig,
    maskset: MaskSet,
    eps_rel: float = DEFAULT_EPS_REL,
) -> ViewProjections:
    """Depth-validated point-to-mask assignments for one view."""
    mask, px, py = valid_projection_mask(cloud, view, rig, eps_rel)
    ids = np.flatnonzero(mask).astype(np.int64)
    mids = maskset.mask_map[py[ids], px[ids]].astype(np.int64)
    keep = mids > 0
    return ViewProjections(rig_name=view.rig_name, point_ids=ids[keep], mask_ids=mids[keep])


def sbff_counts(proj: ViewProjections, k: int):
    """Per-mask projected-point counts and the top-k-smallest threshold.

    Only masks that received at least one projection participate. Returns
    (mask_ids, counts, tau, smallest) where `smallest` flags the masks whose
    sizes define tau (the top-k fewest, ties broken by lower mask id); those
    are never down-sampled. With fewer than k masks, tau averages all of them.
    """
    if len(proj.mask_ids) == 0:
        raise ConfigError("sbff needs at least one projected mask")
    mask_ids, counts = np.unique(proj.mask_ids, return_counts=True)
    order = np.lexsort((mask_ids, counts))
    take = min(k, len(mask_ids))
    tau = float(counts[order[:take]].mean())
    smallest = np.zeros(len(mask_ids), dtype=bool)
    smallest[order[:take]] = True
    return mask_ids, counts, tau, smallest


def balanced_sample(
    proj: ViewProjections, params: SbffParams
) -> ViewProjections:
    """Down-sample over-populated masks to floor(tau) projections.

    The masks defining tau keep all their points; sampling is uniform without
    replacement, seeded per view so execution order never matters. Disabled
    params return the input untouched.
    """
    if not params.enabled or len(proj.mask_ids) == 0:
        return proj
    mask_ids, counts, tau, smallest = sbff_counts(proj, params.k)
    cap = int(np.floor(tau))
    rng = rng_for(params.seed, "sbff", proj.rig_name)
    keep = np.ones(len(proj.point_ids), dtype=bool)
    for mid, cnt, exempt in zip(mask_ids, counts, smallest):
        if exempt or cnt <= tau:
            continue
        rows = np.flatnonzero(proj.mask_ids == mid)
        drop = rows[rng.choice(cnt, size=cnt - cap, replace=False, shuffle=False)]
        keep[drop] = False
    return ViewProjections(
        rig_name=proj.rig_name,
        point_ids=proj.point_ids[keep],
        mask_ids=proj.mask_ids[keep],
    )


def lift_views(
    cloud: PointCloud,
    views: list[RenderedView],
    rigs: list[CameraRig],
    masksets: list[MaskSet],
    sbff: SbffParams,
    eps_rel: float = DEFAULT_EPS_REL,
    threads: int = 1,
) -> list[ViewProjections]:
    """Per-view lift + balancing; views are independent and may run in parallel."""

    def one(args):
        view, rig, ms = args
        proj = valid_projections(cloud, view, rig, ms, eps_rel)
        if len(proj.mask_ids) == 0:
            return proj
        return balanced_sample(proj, sbff)

    triples = list(zip(views, rigs, masksets))
    if threads <= 1:
        return [one(t) for t in triples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, triples))


def fuse(
    cloud: PointCloud,
    retained: list[ViewProjections],
    masksets: list[MaskSet],
) -> FeatureLibrary:
    """Average retained mask features per point and re-normalize.

    Contributions are reduced in ascending view-name order, so the result is
    independent of how the per-view work was scheduled.
    """
    if len(retained) != len(masksets):
        raise ConfigError("one maskset per retained projection set required")
    dims = {ms.feature_dim for ms in masksets}
    if len(dims) > 1:
        raise ConfigError(f"masksets disagree on feature dim: {sorted(dims)}")
    c = dims.pop() if dims else 0
    n = len(cloud)
    acc = np.zeros((n, c), dtype=np.float64)
    count = np.zeros(n, dtype=np.uint32)
    order = np.argsort([p.rig_name for p in retained], kind="stable")
    for vi in order:
        proj, ms = retained[vi], masksets[vi]
        if proj.rig_name != ms.rig_name:
            raise ConfigError(f"projection/maskset mismatch: {proj.rig_name} vs {ms.rig_name}")
        if len(proj.point_ids) == 0:
            continue
        feats = ms.features[proj.mask_ids - 1].astype(np.float64)
        np.add.at(acc, proj.point_ids, feats)
        np.add.at(count, proj.point_ids, 1)
    covered = count >= 1
    features = np.zeros((n, c), dtype=np.float32)
    if covered.any():
        mean = acc[covered] / count[covered, None]
        norms = np.linalg.norm(mean, axis=1, keepdims=True)
        if float(norms.min()) <= 0.0:
            raise ConfigError("degenerate fused feature: contributions cancelled exactly")
        features[covered] = (mean / norms).astype(np.float32)
    return FeatureLibrary(covered=covered, features=features, view_count=count)


def build_library(
    cloud: PointCloud,
    views: list[RenderedView],
    rigs: list[CameraRig],
    masksets: list[MaskSet],
    sbff: SbffParams,
    eps_rel: float = DEFAULT_EPS_REL,
    threads: int = 1,
) -> FeatureLibrary:
    """lift_views + fuse in one call."""
    retained = lift_views(cloud, views, rigs, masksets, sbff, eps_rel, threads)
    return fuse(cloud, retained, masksets)


# --- OU3F library file ---------------------------------------------------------

def _record_dtype(c: int) -> np.dtype:
    return np.dtype([("covered", "u1"), ("view_count", "<u4"), ("f", "<f4", (c,))])


def write_library(lib: FeatureLibrary, path) -> None:
    n, c = lib.features.shape
    rec = np.zeros(n, dtype=_record_dtype(c))
    rec["covered"] = lib.covered.astype(np.uint8)
    rec["view_count"] = lib.view_count
    rec["f"] = lib.features
    with open(path, "wb") as f:
        f.write(OU3F_MAGIC)
        f.write(struct.pack("<IQI", 1, n, c))
        f.write(rec.tobytes())


def read_library(path) -> FeatureLibrary:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise FormatError(f"{path}: file too short for an OU3F header")
    magic = raw[:4]
    if magic != OU3F_MAGIC:
        raise FormatError(f"{path}: bad magic: expected {OU3F_MAGIC!r}, found {magic!r}")
    version, n, c = struct.unpack_from("<IQI", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported OU3F version {version}")
    dtype = _record_dtype(c)
    need = 20 + n * dtype.itemsize
    if len(raw) != need:
        raise FormatError(
            f"{path}: payload size mismatch: header implies {need} bytes, file has {len(raw)}"
        )
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=20)
    return FeatureLibrary(
        covered=rec["covered"].astype(bool),
        features=rec["f"].copy(),
        view_count=rec["view_count"].copy(),
    )
