"""On-disk dataset: scenes/<seed>/frames/<step>/{cam*.ppm, gt.bin, captions.txt}.

gt.bin layout (all little-endian), version 1:
    magic   4s   "AVGT"
    u16     version
    u16     grid cells per side (n)
    f64 x3  ego pose (x, y, yaw)
    f64     frame timestamp
    u8      light state (0 none, 1 red, 2 green)
    u8      instance count K
    4  x    packed semantic masks, ceil(n*n/8) bytes each
            (drivable, lane, vehicle, pedestrian; row-major, bit 0 first)
    n*n u8  instance id map
    6  x    packed future occupancy masks
    K  x    4 f32: center row, center col, flow d-row, flow d-col (cells)
    28 f64  expert trajectory, 7 states of (x, y, yaw, speed)

captions.txt has one line per camera: "cam<k>\t<caption>".
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BevGridSpec, save_rig
from .planner import PLAN_STEPS, Trajectory
from .ppm import read_ppm, write_ppm
from .temporal import FRAME_DT, EgoPose
from .world import (GAUSS_SIGMA, GroundTruthFrame, InstanceTargets,
                    ScenarioSpec, SyntheticScene, generate_scene, gt_frame)
from .render import render_frame

GT_MAGIC = b"AVGT"
GT_VERSION = 1
LIGHT_CODES = {"none": 0, "red": 1, "green": 2}
LIGHT_NAMES = {v: k for k, v in LIGHT_CODES.items()}


class DataError(RuntimeError):
    pass


def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8).ravel()).tobytes()


def _unpack_mask(blob: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=n * n)
    return bits.reshape(n, n).astype(bool)


def write_gt(path, gt: GroundTruthFrame, spec: BevGridSpec):
    n = spec.cells_per_side
    k = gt.targets.centers.shape[0]
    if gt.instances.max(initial=0) > 255:
        raise DataError("more than 255 instances in one frame")
    with open(path, "wb") as f:
        f.write(GT_MAGIC)
        f.write(struct.pack("<HH", GT_VERSION, n))
        f.write(struct.pack("<dddd", gt.ego_pose.x, gt.ego_pose.y,
                            gt.ego_pose.yaw, gt.ego_pose.t))
        f.write(struct.pack("<BB", LIGHT_CODES[gt.light_state], k))
        for i in range(4):
            f.write(_pack_mask(gt.semantic[i]))
        f.write(gt.instances.astype(np.uint8).tobytes())
        for i in range(PLAN_STEPS):
            f.write(_pack_mask(gt.occupancy[i]))
        for i in range(k):
            f.write(struct.pack("<ffff", gt.targets.centers[i, 0],
                                gt.targets.centers[i, 1],
                                gt.targets.flows[i, 0], gt.targets.flows[i, 1]))
        f.write(np.ascontiguousarray(gt.expert.states, dtype="<f8").tobytes())


def _rebuild_targets(instances: np.ndarray, centers: np.ndarray,
                     flows: np.ndarray) -> InstanceTargets:
    n = instances.shape[0]
    heat = np.zeros((n, n))
    offsets = np.zeros((2, n, n))
    flow = np.zeros((2, n, n))
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for i in range(centers.shape[0]):
        cr, ccol = centers[i]
        sel = instances == i + 1
        offsets[0][sel] = cr - rr[sel]
        offsets[1][sel] = ccol - cc[sel]
        flow[0][sel] = flows[i, 0]
        flow[1][sel] = flows[i, 1]
        d2 = (rr - cr) ** 2 + (cc - ccol) ** 2
        heat = np.maximum(heat, np.exp(-d2 / (2.0 * GAUSS_SIGMA ** 2)))
    return InstanceTargets(heat, offsets, flow, instances > 0, centers, flows)


def read_gt(path, step: int) -> GroundTruthFrame:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GT_MAGIC:
        raise DataError(f"bad gt magic in {path}")
    version, n = struct.unpack_from("<HH", blob, 4)
    if version != GT_VERSION:
        raise DataError(f"unsupported gt version {version} in {path}")
    off = 8
    x, y, yaw, t = struct.unpack_from("<dddd", blob, off)
    off += 32
    light_code, k = struct.unpack_from("<BB", blob, off)
    off += 2
    nbytes = (n * n + 7) // 8
    sem = np.zeros((4, n, n), dtype=bool)
    for i in range(4):
        sem[i] = _unpack_mask(blob[off:off + nbytes], n)
        off += nbytes
    inst = np.frombuffer(blob, dtype=np.uint8, count=n * n, offset=off
                         ).reshape(n, n).astype(np.int32)
    off += n * n
    occ = np.zeros((PLAN_STEPS, n, n), dtype=bool)
    for i in range(PLAN_STEPS):
        occ[i] = _unpack_mask(blob[off:off + nbytes], n)
        off += nbytes
    rec = np.frombuffer(blob, dtype="<f4", count=4 * k, offset=off
                        ).reshape(k, 4).astype(np.float64)
    off += 16 * k
    expert = np.frombuffer(blob, dtype="<f8", count=28, offset=off
                           ).reshape(7, 4).copy()
    pose = EgoPose(x, y, yaw, t=t)
    return GroundTruthFrame(
        step=step, ego_pose=pose, semantic=sem, instances=inst, occupancy=occ,
        expert=Trajectory(expert, profile="expert"), captions=[],
        light_state=LIGHT_NAMES[light_code],
        targets=_rebuild_targets(inst, rec[:, :2], rec[:, 2:]))


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------

def scene_dir(root, seed: int) -> Path:
    return Path(root) / "scenes" / f"{seed:05d}"


def usable_steps(duration: int) -> range:
    """Steps that have a full 3 s future; images exist exactly for these."""
    return range(0, duration - PLAN_STEPS)


def write_scene(root, scene: SyntheticScene, spec: BevGridSpec):
    sdir = scene_dir(root, scene.spec.seed)
    for step in usable_steps(scene.duration):
        fdir = sdir / "frames" / f"{step:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        frame = render_frame(scene, step)
        for k in range(frame.images.shape[0]):
            write_ppm(fdir / f"cam{k}.ppm", frame.images[k])
        gt = gt_frame(scene, step, spec)
        write_gt(fdir / "gt.bin", gt, spec)
        with open(fdir / "captions.txt", "w") as f:
            for k, cap in enumerate(gt.captions):
                f.write(f"cam{k}\t{cap}\n")
    with open(sdir / "scene.json", "w") as f:
        json.dump({
            "spec": scene.spec.to_dict(),
            "seed": scene.spec.seed,
            "layout": scene.spec.layout,
            "duration": scene.duration,
            "route": scene.route.tolist(),
            "stop_line_s": scene.stop_line_s,
            "ambiguous_noun": scene.ambiguous_noun,
        }, f)


def read_captions(fdir) -> list[str]:
    out = []
    with open(Path(fdir) / "captions.txt") as f:
        for line in f:
            _, cap = line.rstrip("\n").split("\t", 1)
            out.append(cap)
    return out


@dataclass
class FrameRecord:
    """Everything a training/eval step needs for one sample."""

    seed: int
    step: int
    images: list[np.ndarray]        # h+1 arrays of (6, 3, H, W), oldest first
    poses: list[EgoPose]            # matching ego poses
    gt: GroundTruthFrame
    captions: list[str]


def load_frame(root, seed: int, step: int, history: int) -> FrameRecord:
    sdir = scene_dir(root, seed)
    if not sdir.exists():
        raise DataError(f"missing scene directory {sdir}")
    images = []
    poses = []
    for s in range(step - history, step + 1):
        fdir = sdir / "frames" / f"{s:03d}"
        if not fdir.exists():
            raise DataError(f"missing frame {fdir}")
        cams = [read_ppm(fdir / f"cam{k}.ppm") for k in range(6)]
        images.append(np.stack(cams))
        gt_s = read_gt(fdir / "gt.bin", s)
        poses.append(gt_s.ego_pose)
        if s == step:
            gt = gt_s
            captions = read_captions(fdir)
    return FrameRecord(seed, step, images, poses, gt, captions)


# ---------------------------------------------------------------------------
# dataset generation and the manifest
# ---------------------------------------------------------------------------

def _layout_for(rng: np.random.Generator, mix: dict[str, float]) -> str:
    names = sorted(mix)
    probs = np.array([mix[k] for k in names], dtype=np.float64)
    probs /= probs.sum()
    return names[int(rng.choice(len(names), p=probs))]


def scenario_for_seed(cfg, seed: int) -> ScenarioSpec:
    rng = np.random.default_rng(seed + 777)
    layout = _layout_for(rng, cfg.layout_mix)
    behavior = "keep-lane"
    light = "none"
    if layout == "intersection":
        light = "red" if rng.random() < 0.3 else "green"
        if rng.random() < 0.3:
            behavior = "turn"
        elif light == "red":
            behavior = "stop-at-red"
    agents = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
    return ScenarioSpec(seed=seed, duration=cfg.scene_duration, layout=layout,
                        agent_count=agents, light_schedule=light,
                        ego_behavior=behavior,
                        ambiguous_boxes=cfg.ambiguous_scenes)


def build_scene_with_retry(cfg, seed: int, attempts: int = 5):
    """Deterministic fallback: rare layouts fail their feasibility check
    (e.g. an unlucky mover near a turn); derived seeds stand in."""
    from .world import InfeasibleScenarioError
    last = None
    for k in range(attempts):
        try:
            return generate_scene(scenario_for_seed(cfg, seed + k * 7919),
                                  image_size=tuple(cfg.image_size))
        except InfeasibleScenarioError as e:
            last = e
    raise last


def generate_dataset(cfg, root) -> dict:
    """Write all scenes plus a manifest; returns the manifest dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec = BevGridSpec(cfg.grid_extent, cfg.grid_resolution)
    train_base = [cfg.seed * 100000 + i for i in range(cfg.n_train_scenes)]
    val_base = [cfg.seed * 100000 + cfg.n_train_scenes + i
                for i in range(cfg.n_val_scenes)]
    train_seeds: list[int] = []
    val_seeds: list[int] = []
    for base, out_list in ((train_base, train_seeds), (val_base, val_seeds)):
        for seed in base:
            scene = build_scene_with_retry(cfg, seed)
            write_scene(root, scene, spec)
            out_list.append(scene.spec.seed)
    save_rig(root / "rig.json", build_default_rig(cfg))
    manifest = {
        "format_version": 1,
        "config_hash": cfg.hash(),
        "grid_extent": cfg.grid_extent,
        "grid_resolution": cfg.grid_resolution,
        "scene_duration": cfg.scene_duration,
        "train_seeds": train_seeds,
        "val_seeds": val_seeds,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def build_default_rig(cfg):
    from .geometry import build_ring_rig
    return build_ring_rig(6, image_size=tuple(cfg.image_size))


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    with open(path) as f:
        return json.load(f)


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()).hexdigest()
