"""Class-agnostic mask proposals for rendered views.

Graph-based segmentation (Felzenszwalb) over the RGB image; pure-black
pixels are rendering background and never belong to a mask. Segments below
the minimum pixel count are dropped and ids are re-packed densely from 1.
"""

from __future__ import annotations

import numpy as np
from skimage.segmentation import felzenszwalb


def propose_masks(
    rgb: np.ndarray,
    min_pixels: int = 64,
    scale: float = 200.0,
    sigma: float = 0.6,
) -> np.ndarray:
    """Returns a (h, w) uint32 mask-id map; 0 is background."""
    rgb = np.asarray(rgb)
    foreground = rgb.any(axis=2)
    out = np.zeros(rgb.shape[:2], dtype=np.uint32)
    if not foreground.any():
        return out
    segments = felzenszwalb(rgb, scale=scale, sigma=sigma, min_size=min_pixels)
    next_id = 1
    for seg_id in np.unique(segments):
        sel = (segments == seg_id) & foreground
        if int(sel.sum()) < min_pixels:
            continue
        out[sel] = next_id
        next_id += 1
    return out
