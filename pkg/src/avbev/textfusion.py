"""Text-to-BEV conditioning: embeddings, FiLM parameters, gated fusion.

The stub embedder stands in for a pretrained text encoder: each token of
the (lowercased, alphanumeric) token multiset seeds a PCG64 stream via
SHA-256, the per-token Gaussian vectors are summed, and the result is
L2-normalized then rounded through float32 so that a 32-bit file round
trip reproduces it bit-exactly.  Texts are truncated to the first
MAX_TOKENS tokens, mirroring the context limit of the real encoder.
Any external tool that writes BTXE files in stub mode must follow the
same construction.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import BevGrid

BTXE_MAGIC = b"BTXE"
BTXE_VERSION = 1
MAX_TOKENS = 77
STUB_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class TextEmbedding:
    """Unit-norm embedding vector for one frame of text."""

    vector: np.ndarray
    source_tag: str = "stub"          # "stub" or "clip-file"
    frame_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding contains non-finite values")
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"embedding norm {norm} deviates from 1 by > 1e-5")

    @property
    def dim(self) -> int:
        return self.vector.size


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())[:MAX_TOKENS]


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8],
                          "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(dim)


def stub_embed(text: str, dim: int = STUB_DIM, frame_id: str = "") -> TextEmbedding:
    """Deterministic hash embedding of the token multiset of ``text``."""
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("stub_embed requires text with at least one token")
    acc = np.zeros(dim)
    for tok in tokens:
        acc += _token_vector(tok, dim)
    acc /= np.linalg.norm(acc)
    canonical = acc.astype(np.float32).astype(np.float64)
    return TextEmbedding(canonical, source_tag="stub", frame_id=frame_id)


# ---------------------------------------------------------------------------
# BTXE file format: magic "BTXE", u32 version, u32 count, u32 dim, then per
# record u16 frame-id length + utf-8 bytes + dim float32 LE values.
# ---------------------------------------------------------------------------

class BtxeFormatError(ValueError):
    pass


def write_embeddings(path, embeddings: dict[str, TextEmbedding]):
    dims = {e.dim for e in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"mixed embedding dims {dims}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as f:
        f.write(BTXE_MAGIC)
        f.write(struct.pack("<III", BTXE_VERSION, len(embeddings), dim))
        for fid, emb in embeddings.items():
            fb = fid.encode("utf-8")
            f.write(struct.pack("<H", len(fb)))
            f.write(fb)
            f.write(emb.vector.astype("<f4").tobytes())


@dataclass
class EmbeddingTable:
    """Loaded embedding map plus a renormalization warning counter."""

    embeddings: dict[str, TextEmbedding]
    renormalized: int = 0

    def get(self, frame_id: str) -> TextEmbedding | None:
        return self.embeddings.get(frame_id)

    def __len__(self):
        return len(self.embeddings)


def load_embeddings(path) -> EmbeddingTable:
    """Read a BTXE file; vectors are upconverted to float64 on load.

    Norm deviations up to 1e-5 are accepted as-is (float32 storage cannot
    do better); deviations in (1e-5, 1e-3] are renormalized and counted;
    anything worse is a format error.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != BTXE_MAGIC:
        raise BtxeFormatError(f"bad magic at byte 0 in {path}")
    if len(blob) < 16:
        raise BtxeFormatError(f"truncated header at byte {len(blob)} in {path}")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != BTXE_VERSION:
        raise BtxeFormatError(f"unsupported version {version} at byte 4")
    off = 16
    out: dict[str, TextEmbedding] = {}
    renormalized = 0
    for _ in range(count):
        if off + 2 > len(blob):
            raise BtxeFormatError(f"truncated record header at byte {off}")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + nlen + 4 * dim > len(blob):
            raise BtxeFormatError(f"truncated record at byte {off}")
        fid = blob[off:off + nlen].decode("utf-8")
        off += nlen
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off
                            ).astype(np.float64)
        off += 4 * dim
        if fid in out:
            raise BtxeFormatError(f"duplicate frame-id {fid!r}")
        norm = np.linalg.norm(vec)
        dev = abs(norm - 1.0)
        if dev > 1e-3:
            raise BtxeFormatError(
                f"embedding {fid!r} norm {norm:.6f} deviates by > 1e-3")
        if dev > 1e-5:
            vec = vec / norm
            renormalized += 1
        out[fid] = TextEmbedding(vec, source_tag="clip-file", frame_id=fid)
    return EmbeddingTable(out, renormalized)


# ---------------------------------------------------------------------------
# FiLM conditioning and the learnable fusion gate
# ---------------------------------------------------------------------------

@dataclass
class FilmParams:
    """Per-channel scale (gamma) and shift (beta)."""

    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ad.ShapeMismatchError(
                f"gamma {self.gamma.shape} vs beta {self.beta.shape}")


class FilmMlp:
    """Embedding -> (gamma, beta): two-layer MLP whose output is chunked.

    The final layer starts at zero so modulation begins as the identity.
    """

    def __init__(self, rng, embed_dim: int, channels: int, name: str = "film"):
        self.embed_dim = embed_dim
        self.channels = channels
        self.mlp = nn.Mlp(rng, embed_dim, 2 * embed_dim, 2 * channels,
                          name, zero_init_out=True)

    def parameters(self):
        return self.mlp.parameters()

    def __call__(self, embedding: TextEmbedding | Tensor) -> FilmParams:
        vec = embedding if isinstance(embedding, Tensor) else \
            ad.constant(embedding.vector)
        if vec.size != self.embed_dim:
            raise ad.ShapeMismatchError(
                f"embedding dim {vec.size} != trained dim {self.embed_dim}")
        out = self.mlp(ad.reshape(vec, (1, self.embed_dim)))
        gamma = ad.reshape(ad.narrow(out, 1, 0, self.channels), (self.channels,))
        beta = ad.reshape(ad.narrow(out, 1, self.channels, self.channels),
                          (self.channels,))
        return FilmParams(gamma, beta)


def modulate(grid: BevGrid, params: FilmParams) -> BevGrid:
    """FiLM with residual scale: out = (1 + gamma) * s + beta, per channel."""
    c = grid.channels
    if params.gamma.size != c:
        raise ad.ShapeMismatchError(
            f"FiLM params for {params.gamma.size} channels, grid has {c}")
    scale = ad.reshape(ad.add(params.gamma, 1.0), (c, 1, 1))
    shift = ad.reshape(params.beta, (c, 1, 1))
    return BevGrid(ad.add(ad.mul(grid.features, scale), shift), grid.spec,
                   t=grid.t)


class FusionGate:
    """Learnable per-channel convex blend between raw and modulated BEV."""

    def __init__(self, channels: int, name: str = "gate"):
        self.logits = Tensor(np.zeros(channels), name=f"{name}.logits")

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))

    def parameters(self):
        return {self.logits.name: self.logits}


def weighted_fuse(raw: BevGrid, modulated: BevGrid, gate: FusionGate) -> BevGrid:
    """out = (1 - w) * raw + w * modulated with w = sigmoid(gate logits)."""
    if raw.features.shape != modulated.features.shape:
        raise ad.ShapeMismatchError(
            f"weighted_fuse: {raw.features.shape} vs {modulated.features.shape}")
    c = raw.channels
    w = ad.reshape(ad.sigmoid(gate.logits), (c, 1, 1))
    one_minus = ad.add(ad.mul(w, -1.0), 1.0)
    out = ad.add(ad.mul(raw.features, one_minus), ad.mul(modulated.features, w))
    return BevGrid(out, raw.spec, t=raw.t)
