"""Read-only access to the driving dataset directory.

Only the documented on-disk interfaces are touched: manifest.json,
frames/<step>/captions.txt, cam*.ppm, and the little-endian gt.bin layout
(magic "AVGT" v1: pose, light, packed semantic masks, instance map, packed
future occupancy, per-instance center/flow records, expert trajectory).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GT_MAGIC = b"AVGT"
LIGHT_NAMES = {0: "none", 1: "red", 2: "green"}


@dataclass
class FrameInfo:
    frame_id: str
    seed: int
    step: int
    captions: list[str]          # per camera, cam0 is the front view
    vehicle_count: int
    pedestrian_present: bool
    barrier_present: bool
    light_state: str
    expert: np.ndarray           # (7, 4) x, y, yaw, speed


def _unpack_mask(blob: bytes, off: int, n: int):
    nbytes = (n * n + 7) // 8
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes,
                                       offset=off), count=n * n)
    return bits.reshape(n, n).astype(bool), off + nbytes


def read_gt_summary(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GT_MAGIC:
        raise ValueError(f"bad gt magic in {path}")
    version, n = struct.unpack_from("<HH", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported gt version {version}")
    off = 8 + 32
    light_code, k = struct.unpack_from("<BB", blob, off)
    off += 2
    sem = []
    for _ in range(4):
        mask, off = _unpack_mask(blob, off, n)
        sem.append(mask)
    off += n * n                  # instance id map
    occ1, off = _unpack_mask(blob, off, n)
    for _ in range(5):
        _, off = _unpack_mask(blob, off, n)
    off += 16 * k                 # per-instance records
    expert = np.frombuffer(blob, dtype="<f8", count=28, offset=off
                           ).reshape(7, 4).copy()
    barrier = bool((occ1 & avoid_classes(sem)).any())
    return {
        "light_state": LIGHT_NAMES[light_code],
        "vehicle_count": int(k),
        "pedestrian_present": bool(sem[3].any()),
        "barrier_present": barrier,
        "expert": expert,
    }


def avoid_classes(sem):
    return ~(sem[2] | sem[3])


def frame_dirs(dataset: Path):
    for scene in sorted((Path(dataset) / "scenes").iterdir()):
        frames = scene / "frames"
        if not frames.is_dir():
            continue
        for fdir in sorted(frames.iterdir()):
            yield int(scene.name), int(fdir.name), fdir


def read_captions(fdir: Path) -> list[str]:
    out = []
    with open(fdir / "captions.txt") as f:
        for line in f:
            _, cap = line.rstrip("\n").split("\t", 1)
            out.append(cap)
    return out


def load_frames(dataset) -> list[FrameInfo]:
    dataset = Path(dataset)
    if not (dataset / "manifest.json").exists():
        raise FileNotFoundError(f"{dataset} has no manifest.json")
    frames = []
    for seed, step, fdir in frame_dirs(dataset):
        summary = read_gt_summary(fdir / "gt.bin")
        frames.append(FrameInfo(
            frame_id=f"{seed:05d}/{step:03d}",
            seed=seed,
            step=step,
            captions=read_captions(fdir),
            vehicle_count=summary["vehicle_count"],
            pedestrian_present=summary["pedestrian_present"],
            barrier_present=summary["barrier_present"],
            light_state=summary["light_state"],
            expert=summary["expert"],
        ))
    return frames
