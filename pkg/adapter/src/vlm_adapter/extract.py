"""Per-view mask feature extraction and class text embedding."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AdapterError
from .formats import write_ou3d, write_ou3t
from .masks import propose_masks
from .models import Encoders, load_encoders


def _mask_crop(rgb: np.ndarray, mask: np.ndarray, size: int) -> np.ndarray:
    """Bounding-box crop of one mask with other pixels zeroed, model-sized."""
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    crop = np.zeros((y1 - y0, x1 - x0, 3), dtype=np.uint8)
    sel = mask[y0:y1, x0:x1]
    crop[sel] = rgb[y0:y1, x0:x1][sel]
    return np.asarray(Image.fromarray(crop).resize((size, size), Image.BILINEAR))


def _rig_sizes(view_dir: Path) -> dict[str, tuple[int, int]]:
    rigs_json = view_dir / "rigs.json"
    if not rigs_json.exists():
        return {}
    return {d["id"]: (d["h"], d["w"]) for d in json.loads(rigs_json.read_text())}


def extract_views(
    view_dir,
    out_dir,
    model_id: str = "tiny-clip",
    seed: int = 0,
    min_pixels: int = 64,
    felz_scale: float = 200.0,
    batch_size: int = 32,
    encoders: Encoders | None = None,
) -> list[Path]:
    """One `view_<id>.ou3d` per `view_<id>.png`; features are L2-normalized
    and mask ids run densely from 1."""
    view_dir = Path(view_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pngs = sorted(view_dir.glob("view_*.png"))
    if not pngs:
        raise AdapterError(f"no view_*.png files under {view_dir}")
    enc = encoders if encoders is not None else load_encoders(model_id, seed)
    expected = _rig_sizes(view_dir)

    written = []
    for png in pngs:
        rig_name = png.stem.removeprefix("view_")
        rgb = np.asarray(Image.open(png).convert("RGB"))
        if rig_name in expected and rgb.shape[:2] != expected[rig_name]:
            raise AdapterError(
                f"{png.name}: image size {rgb.shape[:2]} does not match rig "
                f"header {expected[rig_name]}"
            )
        mask_map = propose_masks(rgb, min_pixels=min_pixels, scale=felz_scale)
        n_masks = int(mask_map.max())
        feats = np.zeros((0, enc.feature_dim), dtype=np.float32)
        if n_masks:
            rows = []
            for lo in range(1, n_masks + 1, batch_size):
                ids = range(lo, min(lo + batch_size, n_masks + 1))
                crops = [_mask_crop(rgb, mask_map == k, enc.image_size) for k in ids]
                rows.append(enc.encode_images(crops))
            feats = np.concatenate(rows)
        out_path = out_dir / f"view_{rig_name}.ou3d"
        write_ou3d(out_path, mask_map, feats)
        written.append(out_path)
    return written


def embed_texts(
    class_names: list[str],
    out_path,
    model_id: str = "tiny-clip",
    seed: int = 0,
    template: str = "{}",
    expect_dim: int | None = None,
    encoders: Encoders | None = None,
) -> Path:
    """Unit-norm embedding per class, written as an OU3T table."""
    if not class_names:
        raise AdapterError("class list is empty")
    enc = encoders if encoders is not None else load_encoders(model_id, seed)
    if expect_dim is not None and enc.feature_dim != expect_dim:
        raise AdapterError(
            f"encoder dim {enc.feature_dim} does not match expected {expect_dim}"
        )
    vectors = enc.encode_texts([template.format(name) for name in class_names])
    write_ou3t(out_path, list(class_names), vectors)
    return Path(out_path)
