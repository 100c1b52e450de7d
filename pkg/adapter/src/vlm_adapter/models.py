"""Vision/text encoder loading.

Two paths: any Hugging Face CLIP checkpoint by id (requires the weights to
be available locally or downloadable), or the bundled `tiny-clip` fallback —
a small randomly initialized CLIP architecture with a byte-level tokenizer.
The fallback runs real transformer inference fully offline and is seeded, so
its outputs are deterministic; it produces no meaningful semantics, which is
fine for format/integration work (and all this sandbox can do without
network access to model hubs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import AdapterError

TINY_MODEL_ID = "tiny-clip"
_TINY_DIM = 64
_TINY_IMAGE_SIZE = 64

# byte-level tokenizer ids for the fallback text tower
_BOS, _EOS = 256, 257


def _l2(rows: np.ndarray) -> np.ndarray:
    rows = rows.astype(np.float32)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass
class Encoders:
    model_id: str
    feature_dim: int
    image_size: int
    encode_images: Callable[[list[np.ndarray]], np.ndarray]
    encode_texts: Callable[[list[str]], np.ndarray]


def _build_tiny(seed: int) -> Encoders:
    from transformers import (
        CLIPTextConfig,
        CLIPTextModelWithProjection,
        CLIPVisionConfig,
        CLIPVisionModelWithProjection,
    )

    torch.manual_seed(seed)
    vision = CLIPVisionModelWithProjection(
        CLIPVisionConfig(
            hidden_size=64, intermediate_size=128, num_attention_heads=4,
            num_hidden_layers=2, image_size=_TINY_IMAGE_SIZE, patch_size=16,
            projection_dim=_TINY_DIM,
        )
    ).eval()
    text = CLIPTextModelWithProjection(
        CLIPTextConfig(
            vocab_size=258, hidden_size=64, intermediate_size=128,
            num_attention_heads=4, num_hidden_layers=2,
            max_position_embeddings=77, projection_dim=_TINY_DIM,
            bos_token_id=_BOS, eos_token_id=_EOS,
        )
    ).eval()

    def encode_images(crops: list[np.ndarray]) -> np.ndarray:
        if not crops:
            return np.zeros((0, _TINY_DIM), dtype=np.float32)
        batch = np.stack(
            [c.astype(np.float32) / 127.5 - 1.0 for c in crops]
        ).transpose(0, 3, 1, 2)
        with torch.no_grad():
            out = vision(pixel_values=torch.from_numpy(batch))
        return _l2(out.image_embeds.numpy())

    def encode_texts(texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, _TINY_DIM), dtype=np.float32)
        ids = []
        for t in texts:
            body = list(t.encode("utf-8"))[:75]
            ids.append([_BOS] + body + [_EOS])
        width = max(len(r) for r in ids)
        input_ids = torch.full((len(ids), width), _EOS, dtype=torch.long)
        attn = torch.zeros((len(ids), width), dtype=torch.long)
        for i, row in enumerate(ids):
            input_ids[i, : len(row)] = torch.tensor(row)
            attn[i, : len(row)] = 1
        with torch.no_grad():
            out = text(input_ids=input_ids, attention_mask=attn)
        return _l2(out.text_embeds.numpy())

    return Encoders(TINY_MODEL_ID, _TINY_DIM, _TINY_IMAGE_SIZE, encode_images, encode_texts)


def _build_pretrained(model_id: str) -> Encoders:
    try:
        from transformers import CLIPModel, CLIPProcessor

        model = CLIPModel.from_pretrained(model_id).eval()
        processor = CLIPProcessor.from_pretrained(model_id)
    except Exception as e:
        raise AdapterError(f"model load failure for {model_id!r}: {e}") from e
    dim = int(model.config.projection_dim)
    size = int(model.config.vision_config.image_size)

    def encode_images(crops: list[np.ndarray]) -> np.ndarray:
        if not crops:
            return np.zeros((0, dim), dtype=np.float32)
        inputs = processor(images=list(crops), return_tensors="pt")
        with torch.no_grad():
            emb = model.get_image_features(**inputs)
        return _l2(emb.numpy())

    def encode_texts(texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, dim), dtype=np.float32)
        inputs = processor(text=list(texts), return_tensors="pt", padding=True)
        with torch.no_grad():
            emb = model.get_text_features(**inputs)
        return _l2(emb.numpy())

    return Encoders(model_id, dim, size, encode_images, encode_texts)


def load_encoders(model_id: str = TINY_MODEL_ID, seed: int = 0) -> Encoders:
    torch.set_num_threads(1)  # bit-reproducible inference
    if model_id == TINY_MODEL_ID:
        return _build_tiny(seed)
    return _build_pretrained(model_id)
