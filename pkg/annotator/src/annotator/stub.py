"""Deterministic stand-in embedder shared with the consuming pipeline.

This mirrors, byte for byte, the stub construction documented by the BEV
pipeline's BTXE contract: lowercase alphanumeric tokens (first 77), one
SHA-256-seeded PCG64 Gaussian vector per token occurrence, summed,
L2-normalized in float64 and rounded through float32 so the 32-bit file
round trip is exact.  Any change here must be mirrored on the other side
of the file format.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

MAX_TOKENS = 77
STUB_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())[:MAX_TOKENS]


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8],
                          "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(dim)


def stub_embed(text: str, dim: int = STUB_DIM) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("stub embedding requires at least one token")
    acc = np.zeros(dim)
    for tok in tokens:
        acc += _token_vector(tok, dim)
    acc /= np.linalg.norm(acc)
    return acc.astype(np.float32).astype(np.float64)
