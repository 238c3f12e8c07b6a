"""Held-out evaluation: segmentation IoU, panoptic quality, future IoU,
and planning metrics from the learned costmap.

The report is a plain JSON object with deterministic key order and no
timing fields, so identically-seeded runs are byte-identical.  Its shape
is pinned by schemas/eval_report.schema.json in the repository root.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (load_frame, load_manifest, scene_dir, usable_steps)
from .heads import decode_instances, perfect_instance_output
from .metrics import iou, panoptic_quality
from .model import DrivingModel, embedding_for_captions
from .planner import (EmptySampleSetError, LaneRef, RefinementContext,
                      Trajectory, collision_rate, l2_error,
                      sample_trajectories, select_best, stop_trajectory)
from .textfusion import load_embeddings

CLASS_NAMES = ("drivable", "lane", "vehicle", "pedestrian")
FUTURE_STEPS_2S = 4


def worker_count() -> int:
    raw = os.environ.get("AVBEV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, min(n, os.cpu_count() or 1))


def load_scene_lane(dataset_dir, seed: int, record) -> LaneRef:
    with open(scene_dir(dataset_dir, seed) / "scene.json") as f:
        meta = json.load(f)
    route = np.asarray(meta["route"], dtype=np.float64)
    pose = record.gt.ego_pose
    cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
    rot = np.array([[cy, sy], [-sy, cy]])
    pts = (route - np.array([pose.x, pose.y])) @ rot.T
    lane = LaneRef(pts)
    s0, _ = lane.project((0.0, 0.0))
    ss = np.arange(max(0.0, s0 - 8.0), s0 + 40.0, 1.0)
    return LaneRef(np.array([lane.pose_at(s)[0] for s in ss]))


def future_instance_mask(ids: np.ndarray, flow: np.ndarray,
                         steps: int) -> np.ndarray:
    """Advect each instance by its mean flow for ``steps`` steps."""
    out = np.zeros_like(ids, dtype=bool)
    h, w = ids.shape
    for iid in np.unique(ids):
        if iid == 0:
            continue
        sel = ids == iid
        dr = int(round(float(flow[0][sel].mean()) * steps))
        dc = int(round(float(flow[1][sel].mean()) * steps))
        rr, cc = np.nonzero(sel)
        rr, cc = rr + dr, cc + dc
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[keep], cc[keep]] = True
    return out


def evaluate_frame(model: DrivingModel | None, record, cfg: RunConfig, lane,
                   embedding, text_enabled: bool,
                   use_gt_as_prediction: bool = False) -> dict:
    gt = record.gt
    if use_gt_as_prediction:
        sem_masks = gt.semantic.copy()
        pred_ids = gt.instances.copy()
        heat, offs = perfect_instance_output(gt.instances)
        flow = gt.targets.flow
        costmap_arr = np.where(gt.occupancy.any(axis=0), 5.0, 0.0)
        front = np.zeros(cfg.channels)
    else:
        out = model.forward(record.images, record.poses, embedding,
                            text_enabled=text_enabled)
        sem_masks = out.semantic.masks(cfg.mask_threshold)
        heat = 1.0 / (1.0 + np.exp(-out.instance.heatmap.data[0]))
        offs = out.instance.offsets.data
        flow = out.instance.flow.data
        pred_ids = decode_instances((heat, offs))
        costmap_arr = out.costmap.tensor().data
        front = out.front_feature.data
    inter = np.array([np.logical_and(sem_masks[i], gt.semantic[i]).sum()
                      for i in range(4)], dtype=np.int64)
    union = np.array([np.logical_or(sem_masks[i], gt.semantic[i]).sum()
                      for i in range(4)], dtype=np.int64)
    pq = panoptic_quality(pred_ids, gt.instances)
    fut_pred = future_instance_mask(pred_ids, flow, FUTURE_STEPS_2S)
    fut_gt = gt.occupancy[FUTURE_STEPS_2S - 1]
    fut = (int(np.logical_and(fut_pred, fut_gt).sum()),
           int(np.logical_or(fut_pred, fut_gt).sum()))
    # planning with the produced costmap
    from .geometry import BevGridSpec
    from .planner import Costmap
    spec = model.spec if model is not None else \
        BevGridSpec(cfg.grid_extent, cfg.grid_resolution)
    costmap = Costmap(np.asarray(costmap_arr, dtype=np.float64), spec)
    ego = gt.expert.states[0]
    try:
        candidates = sample_trajectories(ego, [lane], cfg.sampler_config())
    except EmptySampleSetError:
        candidates = [stop_trajectory(ego)]
    best = select_best(candidates, costmap)
    if model is not None and cfg.refine_iterations > 0:
        ctx = RefinementContext(front, gt.light_state)
        best = model.refiner.refine(best, ctx,
                                    iterations=cfg.refine_iterations)
    l2 = l2_error(best, gt.expert)
    cr = collision_rate(best, gt.occupancy, spec)
    return {"inter": inter, "union": union, "pq": pq, "future": fut,
            "l2": l2, "cr": cr}


def run_eval(cfg: RunConfig, dataset_dir, checkpoint=None, model=None,
             text_mode: str = "on", view: str | None = None,
             use_gt_as_prediction: bool = False) -> dict:
    if view is not None:
        cfg = cfg.with_overrides(text_view=view)
    manifest = load_manifest(dataset_dir)
    if model is None and not use_gt_as_prediction:
        model = DrivingModel(cfg)
        if checkpoint is not None:
            model.load(checkpoint)
    if model is None and use_gt_as_prediction:
        model = DrivingModel(cfg)
    table = None
    if cfg.embedding_source == "file":
        table = load_embeddings(cfg.embedding_file)
    steps_all = list(usable_steps(manifest["scene_duration"]))[cfg.history:]
    eval_steps = steps_all[:cfg.eval_frames_per_scene]
    text_enabled = text_mode == "on"

    def eval_scene(seed: int) -> list[dict]:
        results = []
        for st in eval_steps:
            record = load_frame(dataset_dir, seed, st, cfg.history)
            lane = load_scene_lane(dataset_dir, seed, record)
            emb = embedding_for_captions(cfg, record.captions,
                                         f"{seed:05d}/{st:03d}", table)
            results.append(evaluate_frame(model, record, cfg, lane, emb,
                                          text_enabled,
                                          use_gt_as_prediction))
        return results

    seeds = manifest["val_seeds"]
    nw = worker_count()
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            per_scene = list(pool.map(eval_scene, seeds))
    else:
        per_scene = [eval_scene(s) for s in seeds]
    frames = [f for sc in per_scene for f in sc]
    inter = np.sum([f["inter"] for f in frames], axis=0)
    union = np.sum([f["union"] for f in frames], axis=0)
    ious = {name: (float(inter[i] / union[i]) if union[i] else 1.0)
            for i, name in enumerate(CLASS_NAMES)}
    tp = sum(f["pq"].true_positives for f in frames)
    fp = sum(f["pq"].false_positives for f in frames)
    fn = sum(f["pq"].false_negatives for f in frames)
    sq_vals = [f["pq"].sq for f in frames if f["pq"].true_positives > 0]
    sq = float(np.mean(sq_vals)) if sq_vals else (1.0 if tp + fp + fn == 0 else 0.0)
    rq = 1.0 if tp + fp + fn == 0 else tp / (tp + 0.5 * fp + 0.5 * fn)
    fut_i = sum(f["future"][0] for f in frames)
    fut_u = sum(f["future"][1] for f in frames)
    l2 = {k: float(np.mean([f["l2"][k] for f in frames]))
          for k in ("1s", "2s", "3s", "avg")}
    cr = {k: float(np.mean([f["cr"][k] for f in frames]))
          for k in ("1s", "2s", "3s", "avg")}
    report = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "text_mode": text_mode,
        "view": cfg.text_view,
        "frames": len(frames),
        "iou": {k: round(v, 6) for k, v in ious.items()},
        "panoptic": {"pq": round(sq * rq, 6), "sq": round(sq, 6),
                     "rq": round(rq, 6)},
        "future_iou_2s": round(float(fut_i / fut_u) if fut_u else 1.0, 6),
        "planning": {
            "l2": {k: round(v, 6) for k, v in l2.items()},
            "cr": {k: round(v, 6) for k, v in cr.items()},
        },
        "counts": {
            "scenes": len(seeds),
            "renormalized_embeddings": table.renormalized if table else 0,
            "missing_embeddings": model.missing_embedding_count if model else 0,
        },
    }
    return report


def write_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
