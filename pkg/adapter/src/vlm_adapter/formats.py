"""Interchange file writers (independent of the main package).

OU3D: magic "OU3D", u32 version=1, u32 h, u32 w, u32 n_masks, u32 C,
      h*w little-endian u32 mask ids (0 = background),
      n_masks*C little-endian float32 feature rows.
OU3T: magic "OU3T", u32 version=1, u32 C, u32 n_classes,
      per class: u16 name length, UTF-8 name, C little-endian float32.

Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ou3d(path, mask_map: np.ndarray, features: np.ndarray) -> None:
    mask_map = np.ascontiguousarray(mask_map, dtype="<u4")
    features = np.ascontiguousarray(features, dtype="<f4")
    h, w = mask_map.shape
    n_masks, c = features.shape if features.size else (0, features.shape[1])
    payload = (
        b"OU3D"
        + struct.pack("<IIIII", 1, h, w, n_masks, c)
        + mask_map.tobytes()
        + features.tobytes()
    )
    _atomic_write(path, payload)


def write_ou3t(path, class_names: list[str], vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    parts = [b"OU3T", struct.pack("<III", 1, vectors.shape[1], len(class_names))]
    for name, row in zip(class_names, vectors):
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(row.tobytes())
    _atomic_write(path, b"".join(parts))
