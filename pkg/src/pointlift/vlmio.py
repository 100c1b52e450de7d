"""Mask/feature provider boundary.

Downstream stages consume per-view mask sets (a mask-id map plus one feature
vector per mask) and a table of per-class text embeddings. This module
provides a deterministic synthetic oracle that stands in for a frozen
vision-language model, plus bit-exact interchange files so features computed
by an external model can be dropped in: the pipeline cannot tell the
difference between an oracle mask set and one read from disk.

Features are L2-normalized at this boundary; everything downstream scores by
cosine, so unit norm keeps averaging and blending well-behaved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .render import NONE_INDEX, RenderedView
from .scene import PointCloud
from .seeding import rng_for

NORM_TOL = 1e-4
OU3D_MAGIC = b"OU3D"
OU3T_MAGIC = b"OU3T"

# 8-connectivity: diagonal splat contact keeps one object in one component
_CONN8 = np.ones((3, 3), dtype=np.int32)


@dataclass
class MaskSet:
    """Binary masks for one view, encoded as a dense id map (0 = background),
    and one unit-norm feature row per mask id (row k-1 belongs to mask id k)."""

    rig_name: str
    mask_map: np.ndarray   # (h, w) uint32
    features: np.ndarray   # (n_masks, C) float32, unit rows

    def __post_init__(self):
        self.mask_map = np.ascontiguousarray(self.mask_map, dtype=np.uint32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {self.features.shape}")
        n_masks = len(self.features)
        if self.mask_map.size and int(self.mask_map.max()) > n_masks:
            raise ConfigError(
                f"mask id {int(self.mask_map.max())} exceeds feature rows {n_masks}"
            )
        if n_masks:
            norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > NORM_TOL:
                raise ConfigError("mask features must be unit-norm")

    @property
    def n_masks(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class TextEmbeddingTable:
    """Ordered class names with one unit-norm embedding row per class."""

    class_names: list[str]
    vectors: np.ndarray  # (n, C) float32, unit rows

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if len(self.class_names) != len(self.vectors):
            raise ConfigError("one embedding row per class name required")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > NORM_TOL:
            raise ConfigError("text embeddings must be unit-norm")

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, class_name: str) -> np.ndarray:
        return self.vectors[self.class_names.index(class_name)]


def synthetic_text_table(
    class_names: list[str], feature_dim: int, mode: str = "orthogonal", seed: int = 0
) -> TextEmbeddingTable:
    """Desk-scale stand-in for a text encoder.

    "orthogonal" emits mutually orthogonal unit vectors (requires
    len(class_names) <= feature_dim); "random" emits seeded unit vectors with
    pairwise |cos| < 0.5 enforced by rejection.
    """
    n = len(class_names)
    if n == 0:
        raise ConfigError("class list is empty")
    if mode == "orthogonal":
        if n > feature_dim:
            raise ConfigError(
                f"orthogonal mode needs feature_dim >= n_classes ({feature_dim} < {n})"
            )
        vecs = np.eye(n, feature_dim, dtype=np.float32)
    elif mode == "random":
        rng = rng_for(seed, "text-table")
        rows: list[np.ndarray] = []
        attempts = 0
        while len(rows) < n:
            cand = rng.standard_normal(feature_dim)
            cand /= np.linalg.norm(cand)
            if all(abs(float(cand @ r)) < 0.5 for r in rows):
                rows.append(cand)
            attempts += 1
            if attempts > 1000 * n:
                raise ConfigError(
                    f"could not draw {n} embeddings with pairwise |cos| < 0.5 at C={feature_dim}"
                )
        vecs = np.stack(rows).astype(np.float32)
    else:
        raise ConfigError(f"unknown text table mode {mode!r}")
    return TextEmbeddingTable(class_names=list(class_names), vectors=vecs)


def oracle_masks(
    view: RenderedView,
    cloud: PointCloud,
    table: TextEmbeddingTable,
    noise: float = 0.0,
    seed: int = 0,
    min_pixels: int = 1,
) -> MaskSet:
    """Ground-truth mask provider for labeled synthetic scenes.

    Connected components of equal-label pixels become masks; each mask's
    feature is that class's embedding perturbed by seeded Gaussian noise of
    the given scale and re-normalized. Mask id 0 stays reserved for
    background pixels. Components below min_pixels are treated as rendering
    debris and left unmasked (filtering is the producer's call; 1 keeps all).
    """
    if cloud.labels is None:
        raise ConfigError("oracle provider needs a labeled cloud")
    h, w = view.shape
    hit = view.point_index != NONE_INDEX
    label_img = np.full((h, w), -1, dtype=np.int64)
    label_img[hit] = cloud.labels[view.point_index[hit].astype(np.int64)]

    mask_map = np.zeros((h, w), dtype=np.uint32)
    rng = rng_for(seed, "oracle", view.rig_name)
    feats: list[np.ndarray] = []
    next_id = 1
    for cid in np.unique(label_img[hit]) if hit.any() else []:
        comp, n_comp = ndimage.label(label_img == cid, structure=_CONN8)
        sizes = np.bincount(comp.ravel(), minlength=n_comp + 1)
        base = table.vectors[int(cid)].astype(np.float64)
        for c in range(1, n_comp + 1):
            if sizes[c] < min_pixels:
                continue
            mask_map[comp == c] = next_id
            f = base
            if noise > 0:
                f = base + noise * rng.standard_normal(table.feature_dim)
                f = f / np.linalg.norm(f)
            feats.append(f.astype(np.float32))
            next_id += 1
    features = (
        np.stack(feats) if feats else np.zeros((0, table.feature_dim), dtype=np.float32)
    )
    return MaskSet(rig_name=view.rig_name, mask_map=mask_map, features=features)


# --- OU3D interchange file ----------------------------------------------------

def write_maskset(ms: MaskSet, path) -> None:
    h, w = ms.mask_map.shape
    with open(path, "wb") as f:
        f.write(OU3D_MAGIC)
        f.write(struct.pack("<IIIII", 1, h, w, ms.n_masks, ms.feature_dim))
        f.write(ms.mask_map.astype("<u4").tobytes())
        f.write(ms.features.astype("<f4").tobytes())


def read_maskset(path, rig_name: str | None = None) -> MaskSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24:
        raise FormatError(f"{path}: file too short for an OU3D header")
    magic = raw[:4]
    if magic != OU3D_MAGIC:
        raise FormatError(f"{path}: bad magic: expected {OU3D_MAGIC!r}, found {magic!r}")
    version, h, w, n_masks, c = struct.unpack_from("<IIIII", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported OU3D version {version}")
    need = 24 + h * w * 4 + n_masks * c * 4
    if len(raw) != need:
        raise FormatError(
            f"{path}: payload size mismatch: header implies {need} bytes, file has {len(raw)}"
        )
    mask_map = np.frombuffer(raw, dtype="<u4", count=h * w, offset=24).reshape(h, w).copy()
    features = (
        np.frombuffer(raw, dtype="<f4", count=n_masks * c, offset=24 + h * w * 4)
        .reshape(n_masks, c)
        .copy()
    )
    if rig_name is None:
        rig_name = path.stem.removeprefix("view_")
    return MaskSet(rig_name=rig_name, mask_map=mask_map, features=features)


# --- OU3T text table file -----------------------------------------------------

def write_text_table(table: TextEmbeddingTable, path) -> None:
    with open(path, "wb") as f:
        f.write(OU3T_MAGIC)
        f.write(struct.pack("<III", 1, table.feature_dim, len(table.class_names)))
        for name, vec in zip(table.class_names, table.vectors):
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(vec.astype("<f4").tobytes())


def read_text_table(path) -> TextEmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for an OU3T header")
    magic = raw[:4]
    if magic != OU3T_MAGIC:
        raise FormatError(f"{path}: bad magic: expected {OU3T_MAGIC!r}, found {magic!r}")
    version, c, n = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported OU3T version {version}")
    off = 16
    names, rows = [], []
    for _ in range(n):
        if off + 2 > len(raw):
            raise FormatError(f"{path}: truncated at byte {off}")
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + ln + 4 * c > len(raw):
            raise FormatError(f"{path}: truncated at byte {off}")
        names.append(raw[off : off + ln].decode("utf-8"))
        off += ln
        rows.append(np.frombuffer(raw, dtype="<f4", count=c, offset=off).copy())
        off += 4 * c
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after last class")
    vectors = np.stack(rows) if rows else np.zeros((0, c), dtype=np.float32)
    return TextEmbeddingTable(class_names=names, vectors=vectors)
