"""Deterministic seed derivation.

All randomness in the pipeline flows from a single base seed. Every stage
(and every per-view / per-cell unit of work inside a stage) derives its own
stream with `derive_seed`, so results never depend on evaluation order or
thread scheduling.
"""

import hashlib

import numpy as np


def derive_seed(base_seed: int, *tokens) -> int:
    """Derive a 64-bit child seed from a base seed and a label path.

    Tokens may be strings or ints; the derivation is a SHA-256 over their
    canonical encoding, so it is stable across platforms and sessions.
    """
    h = hashlib.sha256()
    h.update(int(base_seed).to_bytes(16, "little", signed=True))
    for tok in tokens:
        if isinstance(tok, (int, np.integer)):
            h.update(b"i" + int(tok).to_bytes(16, "little", signed=True))
        elif isinstance(tok, str):
            enc = tok.encode("utf-8")
            h.update(b"s" + len(enc).to_bytes(4, "little") + enc)
        else:
            raise TypeError(f"seed token must be int or str, got {type(tok)!r}")
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(base_seed: int, *tokens) -> np.random.Generator:
    """A fresh PCG64 generator for one unit of work."""
    return np.random.Generator(np.random.PCG64(derive_seed(base_seed, *tokens)))
