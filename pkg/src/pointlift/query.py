"""Open-vocabulary inference.

Blends the fused 2D library with the distilled 3D field per point (weighted
by alpha, re-normalized), or ensembles their class scores, then labels every
point by cosine argmax against the text embedding table. Includes the
keyword-table query parser that maps free-form text to class lists, and a
similarity heatmap export.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scene import PointCloud, write_cloud
from .vlmio import TextEmbeddingTable

_WORD = re.compile(r"[a-z0-9]+")


def _unit_rows(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.maximum(norms, 1e-30)


@dataclass(frozen=True)
class FusionParams:
    alpha: float = 0.1
    mode: str = "fusion"  # "fusion" | "ensemble"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in ("fusion", "ensemble"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")


@dataclass
class QueryResult:
    """Per-point predictions over a resolved class list."""

    predicted: np.ndarray  # (N,) int32 indices into `classes`
    scores: np.ndarray     # (N, n_classes) float32
    query: str
    classes: list[str]


def fuse_features(
    f2d: np.ndarray, f3d: np.ndarray, covered: np.ndarray, params: FusionParams
) -> np.ndarray:
    """Per-point weighted blend alpha*f3d + (1-alpha)*f2d, re-normalized.

    Uncovered points always take the 3D feature alone; alpha 0 and 1 return
    the respective input rows bit-for-bit on covered points.
    """
    f2d = np.asarray(f2d)
    f3d = np.asarray(f3d)
    covered = np.asarray(covered, dtype=bool)
    if f2d.shape != f3d.shape:
        raise ConfigError(f"feature shapes disagree: {f2d.shape} vs {f3d.shape}")
    if params.alpha == 0.0:
        out = f2d.copy()
        out[~covered] = f3d[~covered]
    elif params.alpha == 1.0:
        out = f3d.copy()
    else:
        # blend directions, not magnitudes: predictions stay invariant to
        # positive rescaling of either feature set
        mix = params.alpha * _unit_rows(f3d) + (1.0 - params.alpha) * _unit_rows(f2d)
        norms = np.linalg.norm(mix, axis=1, keepdims=True)
        if covered.any() and float(norms[covered].min()) <= 0.0:
            raise ConfigError("fusion produced a zero vector: both inputs zero or cancelling")
        out = f2d.astype(np.float32).copy()
        safe = np.maximum(norms, 1e-30)
        out[covered] = (mix[covered] / safe[covered]).astype(np.float32)
        out[~covered] = f3d[~covered]
    if float(np.linalg.norm(out[~covered], axis=1).min(initial=1.0)) <= 0.0:
        raise ConfigError("uncovered point has a zero 3D feature: both inputs zero")
    return out


# points are always scored in fixed-size chunks so that threaded and
# sequential evaluation perform identical arithmetic
_SCORE_CHUNK = 65536


def segment(
    f2d: np.ndarray,
    f3d: np.ndarray,
    covered: np.ndarray,
    table: TextEmbeddingTable,
    params: FusionParams,
    classes: list[str] | None = None,
    query: str = "",
    threads: int = 1,
) -> QueryResult:
    """Cosine-argmax labeling against the table (optionally a class subset).

    Fusion mode scores the blended feature; ensemble mode takes the per-class
    max of the 2D and 3D scores, skipping the 2D term for uncovered points.
    Ties resolve to the lowest class index. Thread count never changes bits.
    """
    if len(table.class_names) == 0:
        raise ConfigError("text table is empty")
    if f2d.shape[1] != table.feature_dim:
        raise ConfigError(
            f"feature dim {f2d.shape[1]} does not match table dim {table.feature_dim}"
        )
    names = list(classes) if classes is not None else list(table.class_names)
    missing = [c for c in names if c not in table.class_names]
    if missing:
        raise ConfigError(f"classes not in table: {missing}")
    t = np.stack([table.row(c) for c in names]).astype(np.float64)

    covered = np.asarray(covered, dtype=bool)
    n = len(f2d)
    chunks = [(lo, min(lo + _SCORE_CHUNK, n)) for lo in range(0, n, _SCORE_CHUNK)]

    def score_chunk(bounds):
        lo, hi = bounds
        cov = covered[lo:hi]
        if params.mode == "fusion":
            fused = fuse_features(f2d[lo:hi], f3d[lo:hi], cov, params)
            return _unit_rows(fused) @ t.T
        s2 = _unit_rows(f2d[lo:hi]) @ t.T
        s3 = _unit_rows(f3d[lo:hi]) @ t.T
        return np.where(cov[:, None], np.maximum(s2, s3), s3)

    if threads <= 1 or len(chunks) <= 1:
        parts = [score_chunk(c) for c in chunks]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(score_chunk, chunks))
    scores = np.concatenate(parts) if parts else np.zeros((0, len(names)))
    predicted = np.argmax(scores, axis=1).astype(np.int32)
    return QueryResult(
        predicted=predicted, scores=scores.astype(np.float32), query=query, classes=names
    )


def parse_query(text: str, lexicon: dict[str, list[str]]) -> list[str]:
    """Longest-match phrase lookup mapping free text to a class list.

    The lexicon maps phrases (any number of words) to class-name lists; the
    result is the order-stable, de-duplicated union over matched phrases.
    Text that matches nothing yields an empty list.
    """
    tokens = _WORD.findall(text.lower())
    compiled: dict[tuple[str, ...], list[str]] = {}
    for phrase, cls in lexicon.items():
        key = tuple(_WORD.findall(phrase.lower()))
        if key:
            compiled[key] = list(cls)
    max_len = max((len(k) for k in compiled), default=0)
    out: list[str] = []
    i = 0
    while i < len(tokens):
        hit = None
        for ln in range(min(max_len, len(tokens) - i), 0, -1):
            key = tuple(tokens[i : i + ln])
            if key in compiled:
                hit = key
                break
        if hit is None:
            i += 1
            continue
        for c in compiled[hit]:
            if c not in out:
                out.append(c)
        i += len(hit)
    return out


def similarity_ramp(sims: np.ndarray) -> np.ndarray:
    """Map cosine values in [-1, 1] onto a fixed blue-to-red ramp."""
    t = (np.clip(np.asarray(sims, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    colors = np.zeros((len(t), 3), dtype=np.uint8)
    colors[:, 0] = np.round(255.0 * t)
    colors[:, 2] = np.round(255.0 * (1.0 - t))
    return colors


def heatmap(
    cloud: PointCloud, features: np.ndarray, text_vec: np.ndarray, out_path=None
):
    """Per-point cosine similarity to one embedding, optionally as colored PLY."""
    text_vec = np.asarray(text_vec, dtype=np.float64).reshape(-1)
    if features.shape[1] != len(text_vec):
        raise ConfigError(
            f"feature dim {features.shape[1]} does not match embedding dim {len(text_vec)}"
        )
    sims = features.astype(np.float64) @ text_vec
    if out_path is not None:
        colored = PointCloud(
            positions=cloud.positions.copy(),
            colors=similarity_ramp(sims),
            labels=None,
            class_names=None,
        )
        write_cloud(colored, out_path)
    return sims
