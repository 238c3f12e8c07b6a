"""Binary PPM (P6) and PGM (P5) image I/O, 8-bit, zero dependencies."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray):
    """image: (3, H, W) float in [0, 1] or (H, W, 3) uint8."""
    if image.ndim == 3 and image.shape[0] == 3:
        arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        arr = arr.transpose(1, 2, 0)
    else:
        arr = np.asarray(image, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (3, H, W) float64 in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path} is not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1   # single whitespace after maxval
    w, h, maxval = int(fields[0]), int(fields[1]), int(fields[2])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray):
    """image: (H, W) float in [0, 1]."""
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())
