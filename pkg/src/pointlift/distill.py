"""3D feature field distilled from the fused 2D library.

The student is a trilinearly interpolated voxel feature field: parameters
live at the centers of occupied voxels (the 8 surrounding a cloud point),
and a query point's raw feature is the trilinear blend of its corner
parameters, normalized before the cosine loss. Training minimizes
mean(1 - cos(student, teacher)) over covered points with the teacher held
constant, using per-parameter first/second moment accumulation (Adam-style)
on the touched voxels of each mini-batch and cosine learning-rate decay.

This keeps the full distillation contract of a neural student (per-point
features over the whole cloud, stop-gradient teacher, cosine objective) in
a few dense arrays, and the checkpoint format leaves room to swap in a
different encoder later.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TrainingDiverged
from .liftfuse import FeatureLibrary
from .scene import PointCloud, bounding_box
from .seeding import rng_for

OU3V_MAGIC = b"OU3V"
_NORM_FLOOR = 1e-12

# offsets of the 8 interpolation corners
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


@dataclass
class TrainConfig:
    """Distillation hyperparameters.

    The defaults are sized for a directly optimized voxel table: 60 epochs
    with Adam moments and cosine decay to 0.1x of the initial rate.
    fill_untrained propagates features into voxels no training point ever
    touched (flood fill from trained neighbors) so the field stays smooth
    over sampling holes; set 0 to disable.
    """

    epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 8192
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_floor: float = 0.1   # final lr = decay_floor * learning_rate
    init_sigma: float = 1e-2
    divergence_factor: float = 10.0
    fill_untrained: int = 32   # max neighbor-fill sweeps after training

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.fill_untrained < 0:
            raise ConfigError("fill_untrained must be >= 0")


class VoxelFeatureField:
    """Sparse lattice of C-dim parameters at occupied voxel centers."""

    def __init__(
        self,
        origin,
        dims,
        voxel_size: float,
        feature_dim: int,
        node_ids: np.ndarray,
        params: np.ndarray,
    ):
        if voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        self.voxel_size = float(voxel_size)
        self.feature_dim = int(feature_dim)
        self.node_ids = np.ascontiguousarray(node_ids, dtype=np.int64)
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        if self.params.shape != (len(self.node_ids), self.feature_dim):
            raise ConfigError("params must be (n_nodes, feature_dim)")
        if not np.isfinite(self.params).all():
            raise ConfigError("field parameters must be finite")
        self.clamped_queries = 0

    @classmethod
    def from_cloud(
        cls,
        cloud: PointCloud,
        voxel_size: float = 0.2,
        feature_dim: int = 64,
        seed: int = 0,
        init_sigma: float = 1e-2,
    ) -> "VoxelFeatureField":
        """Allocate nodes for every voxel corner touched by a cloud point.

        The lattice covers the cloud's bounding box inflated by one voxel on
        every side, with seeded small-Gaussian initial parameters.
        """
        box = bounding_box(cloud)
        vs = float(voxel_size)
        origin = np.asarray(box.origin, dtype=np.float64) - 1.5 * vs
        dims = tuple(int(np.ceil(e / vs)) + 3 for e in box.extents)
        g = (cloud.positions - origin) / vs - 0.5
        i0 = np.floor(g).astype(np.int64)
        corners = (i0[:, None, :] + _CORNERS[None, :, :]).reshape(-1, 3)
        lin = cls._linearize(corners, dims)
        node_ids = np.unique(lin)
        rng = rng_for(seed, "field-init")
        params = init_sigma * rng.standard_normal((len(node_ids), feature_dim))
        return cls(origin, dims, vs, feature_dim, node_ids, params)

    @staticmethod
    def _linearize(ijk: np.ndarray, dims) -> np.ndarray:
        nx, ny, nz = dims
        return (ijk[:, 0] * ny + ijk[:, 1]) * nz + ijk[:, 2]

    def node_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + (np.array([i, j, k], dtype=np.float64) + 0.5) * self.voxel_size

    def slot_of(self, i: int, j: int, k: int) -> int:
        lin = self._linearize(np.array([[i, j, k]], dtype=np.int64), self.dims)[0]
        pos = int(np.searchsorted(self.node_ids, lin))
        if pos >= len(self.node_ids) or self.node_ids[pos] != lin:
            raise KeyError(f"voxel ({i},{j},{k}) has no allocated node")
        return pos

    def interp_support(self, points: np.ndarray):
        """Corner slots and trilinear weights for a batch of points.

        Returns (slots, weights): (B, 8) int64 with -1 for unallocated nodes
        and (B, 8) float64 weights summing to 1. Out-of-grid queries clamp to
        the lattice and bump `clamped_queries`.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = (pts - self.origin) / self.voxel_size - 0.5
        hi = np.array(self.dims, dtype=np.float64) - 1.0
        clamped = (g < 0.0) | (g > hi)
        if clamped.any():
            self.clamped_queries += int(clamped.any(axis=1).sum())
            g = np.clip(g, 0.0, hi)
        i0 = np.minimum(np.floor(g).astype(np.int64), np.array(self.dims) - 2)
        frac = g - i0
        corners = i0[:, None, :] + _CORNERS[None, :, :]
        lin = self._linearize(corners.reshape(-1, 3), self.dims)
        pos = np.searchsorted(self.node_ids, lin)
        pos_c = np.minimum(pos, len(self.node_ids) - 1)
        found = self.node_ids[pos_c] == lin
        slots = np.where(found, pos_c, -1).reshape(-1, 8)
        w = np.ones((len(pts), 8), dtype=np.float64)
        for axis in range(3):
            f = frac[:, axis]
            side = _CORNERS[:, axis]
            w *= np.where(side[None, :] == 1, f[:, None], 1.0 - f[:, None])
        return slots, w

    def raw_features(self, points: np.ndarray) -> np.ndarray:
        """Un-normalized interpolated parameters, float64 (B, C)."""
        slots, w = self.interp_support(points)
        gathered = self.params[np.maximum(slots, 0)]
        gathered[slots < 0] = 0.0
        return np.einsum("bk,bkc->bc", w, gathered)

    def features(self, points: np.ndarray) -> np.ndarray:
        """Unit-norm per-point features, float32 (B, C)."""
        q = self.raw_features(points)
        norms = np.maximum(np.linalg.norm(q, axis=1, keepdims=True), _NORM_FLOOR)
        return (q / norms).astype(np.float32)


def field_features(field: VoxelFeatureField, points: np.ndarray) -> np.ndarray:
    return field.features(points)


def distill_loss(f3d: np.ndarray, f2d: np.ndarray):
    """Mean (1 - cosine) over a batch, and its gradient w.r.t. the student rows.

    The student rows are normalized inside the loss, so the gradient is the
    standard normalized-cosine gradient; the teacher rows are treated as
    constants (stop-gradient).
    """
    q = np.asarray(f3d, dtype=np.float64)
    t = np.asarray(f2d, dtype=np.float64)
    if q.ndim != 2 or q.shape != t.shape:
        raise ConfigError(f"batch shapes disagree: {q.shape} vs {t.shape}")
    b = len(q)
    if b == 0:
        raise ConfigError("empty batch")
    norms = np.maximum(np.linalg.norm(q, axis=1, keepdims=True), _NORM_FLOOR)
    qh = q / norms
    cos = np.einsum("bc,bc->b", qh, t)
    loss = float(np.mean(1.0 - cos))
    grad = -(t - cos[:, None] * qh) / norms / b
    return loss, grad


def loss_and_param_grad(
    field: VoxelFeatureField, points: np.ndarray, teacher: np.ndarray
):
    """Loss plus the dense analytic gradient over every field parameter.

    Used by training (via its sparse form) and by finite-difference checks.
    """
    slots, w = field.interp_support(points)
    gathered = field.params[np.maximum(slots, 0)]
    gathered[slots < 0] = 0.0
    q = np.einsum("bk,bkc->bc", w, gathered)
    loss, dq = distill_loss(q, teacher)
    grad = np.zeros_like(field.params)
    contrib = w[:, :, None] * dq[:, None, :]  # (B, 8, C)
    flat_slots = slots.ravel()
    ok = flat_slots >= 0
    np.add.at(grad, flat_slots[ok], contrib.reshape(-1, field.feature_dim)[ok])
    return loss, grad


def fill_untrained_nodes(
    field: VoxelFeatureField, trained: np.ndarray, max_sweeps: int
) -> int:
    """Flood features from trained voxels into never-trained ones.

    Each sweep sets every unfilled node with at least one filled 6-neighbor
    to the mean of those neighbors, synchronously, so the result does not
    depend on node order. Returns the number of nodes still unfilled (nodes
    in regions the flood never reached keep their initialization).
    """
    ids = field.node_ids
    nx, ny, nz = field.dims
    iz = ids % nz
    iy = (ids // nz) % ny
    ix = ids // (ny * nz)
    nbr = np.full((len(ids), 6), -1, dtype=np.int64)
    for a, (dx, dy, dz) in enumerate(
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    ):
        jx, jy, jz = ix + dx, iy + dy, iz + dz
        ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny) & (jz >= 0) & (jz < nz)
        lin = (jx * ny + jy) * nz + jz
        pos = np.searchsorted(ids, lin)
        pos_c = np.minimum(pos, len(ids) - 1)
        hit = ok & (ids[pos_c] == lin)
        nbr[hit, a] = pos_c[hit]

    filled = np.ascontiguousarray(trained, dtype=bool).copy()
    for _ in range(max_sweeps):
        todo = np.flatnonzero(~filled)
        if len(todo) == 0:
            break
        nb = nbr[todo]
        valid = (nb >= 0) & filled[np.maximum(nb, 0)]
        ready = valid.any(axis=1)
        if not ready.any():
            break
        rows = todo[ready]
        nbv, vv = nb[ready], valid[ready]
        gathered = field.params[np.maximum(nbv, 0)]
        gathered[~vv] = 0.0
        field.params[rows] = gathered.sum(axis=1) / vv.sum(axis=1)[:, None]
        filled[rows] = True
    return int((~filled).sum())


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if total <= 1:
        frac = 0.0
    else:
        frac = (step - 1) / (total - 1)
    cosine = 0.5 * (1.0 + np.cos(np.pi * frac))
    return cfg.learning_rate * (cfg.decay_floor + (1.0 - cfg.decay_floor) * cosine)


def train(
    field: VoxelFeatureField,
    cloud: PointCloud,
    library: FeatureLibrary,
    cfg: TrainConfig,
):
    """Distill the library into the field; returns the per-epoch loss curve.

    Only covered points contribute. Batches are drawn by seeded permutation,
    gradients reduce in canonical point order, and moments update only the
    voxels a batch touches, so runs are bit-reproducible per seed.
    """
    covered = np.flatnonzero(library.covered)
    if len(covered) == 0:
        raise ConfigError("library covers no points; nothing to distill")
    pts = cloud.positions[covered]
    teacher = library.features[covered].astype(np.float64)
    slots_all, w_all = field.interp_support(pts)

    n = len(covered)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    m = np.zeros_like(field.params)
    v = np.zeros_like(field.params)
    rng = rng_for(cfg.seed, "distill-batches")

    def batch_loss_grad(rows):
        slots = slots_all[rows]
        w = w_all[rows]
        gathered = field.params[np.maximum(slots, 0)]
        gathered[slots < 0] = 0.0
        q = np.einsum("bk,bkc->bc", w, gathered)
        loss, dq = distill_loss(q, teacher[rows])
        contrib = (w[:, :, None] * dq[:, None, :]).reshape(-1, field.feature_dim)
        flat = slots.ravel()
        ok = flat >= 0
        touched, inv = np.unique(flat[ok], return_inverse=True)
        g = np.zeros((len(touched), field.feature_dim))
        np.add.at(g, inv, contrib[ok])
        return loss, touched, g

    initial_loss, _, _ = batch_loss_grad(np.arange(n))
    curve: list[float] = []
    trained = np.zeros(len(field.params), dtype=bool)
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            rows = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if len(rows) == 0:
                continue
            step += 1
            loss, touched, g = batch_loss_grad(rows)
            epoch_loss += loss * len(rows)
            trained[touched] = True
            lr = _lr_at(step, total_steps, cfg)
            m[touched] = cfg.beta1 * m[touched] + (1.0 - cfg.beta1) * g
            v[touched] = cfg.beta2 * v[touched] + (1.0 - cfg.beta2) * g * g
            mhat = m[touched] / (1.0 - cfg.beta1 ** step)
            vhat = v[touched] / (1.0 - cfg.beta2 ** step)
            field.params[touched] -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        epoch_loss /= n
        curve.append(epoch_loss)
        if epoch_loss > cfg.divergence_factor * max(initial_loss, 1e-12):
            raise TrainingDiverged(
                f"loss {epoch_loss:.4g} exceeded {cfg.divergence_factor}x "
                f"initial {initial_loss:.4g}"
            )
    if cfg.fill_untrained > 0:
        fill_untrained_nodes(field, trained, cfg.fill_untrained)
    return field, curve


# --- OU3V checkpoint ------------------------------------------------------------

def write_field(field: VoxelFeatureField, path) -> None:
    with open(path, "wb") as f:
        f.write(OU3V_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<d", field.voxel_size))
        f.write(struct.pack("<3d", *field.origin))
        f.write(struct.pack("<3I", *field.dims))
        f.write(struct.pack("<IQ", field.feature_dim, len(field.node_ids)))
        f.write(field.node_ids.astype("<i8").tobytes())
        f.write(field.params.astype("<f4").tobytes())


def read_field(path) -> VoxelFeatureField:
    path = Path(path)
    raw = path.read_bytes()
    header = 4 + 4 + 8 + 24 + 12 + 4 + 8
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for an OU3V header")
    magic = raw[:4]
    if magic != OU3V_MAGIC:
        raise FormatError(f"{path}: bad magic: expected {OU3V_MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported OU3V version {version}")
    (voxel_size,) = struct.unpack_from("<d", raw, 8)
    origin = struct.unpack_from("<3d", raw, 16)
    dims = struct.unpack_from("<3I", raw, 40)
    c, n_nodes = struct.unpack_from("<IQ", raw, 52)
    need = header + n_nodes * 8 + n_nodes * c * 4
    if len(raw) != need:
        raise FormatError(
            f"{path}: payload size mismatch: header implies {need} bytes, file has {len(raw)}"
        )
    node_ids = np.frombuffer(raw, dtype="<i8", count=n_nodes, offset=header)
    params = (
        np.frombuffer(raw, dtype="<f4", count=n_nodes * c, offset=header + n_nodes * 8)
        .reshape(n_nodes, c)
        .astype(np.float64)
    )
    return VoxelFeatureField(origin, dims, voxel_size, c, node_ids.copy(), params)


def write_loss_curve(curve: list[float], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,loss\n")
        for i, loss in enumerate(curve):
            f.write(f"{i},{loss:.10g}\n")
