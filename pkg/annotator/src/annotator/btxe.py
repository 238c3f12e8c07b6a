"""BTXE writer: the embedding interchange format consumed by the pipeline.

Layout: magic "BTXE", u32 version (=1), u32 count, u32 dim, then per record
a u16 frame-id byte length, the UTF-8 frame id, and dim little-endian
float32 values.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BTXE"
VERSION = 1


def write_btxe(path, embeddings: dict[str, np.ndarray]):
    dims = {np.asarray(v).size for v in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"mixed embedding dimensions {dims}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(embeddings), dim))
        for fid, vec in embeddings.items():
            fb = fid.encode("utf-8")
            f.write(struct.pack("<H", len(fb)))
            f.write(fb)
            f.write(np.asarray(vec).astype("<f4").tobytes())


def read_btxe(path) -> dict[str, np.ndarray]:
    """Reader used by this package's own tests; the pipeline has its own."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad BTXE magic in {path}")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported BTXE version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        fid = blob[off:off + nlen].decode("utf-8")
        off += nlen
        out[fid] = np.frombuffer(blob, dtype="<f4", count=dim,
                                 offset=off).astype(np.float64)
        off += 4 * dim
    return out
