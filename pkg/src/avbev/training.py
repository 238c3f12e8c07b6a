"""Training loops: perception + costmap on a generated dataset, and the
scripted traffic-light refinement stage.

Each step rebuilds the dynamic graph for one frame sample, backprops one
combined loss and applies Adam.  Sampling, initialization and logging are
all derived from the run seed, so a rerun reproduces the metrics log
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import RunConfig
from .dataset import FrameRecord, load_frame, load_manifest, usable_steps
from .model import DrivingModel, NumericError, embedding_for_captions
from .planner import (PLAN_STEPS, EmptySampleSetError, SamplerConfig,
                      Trajectory, sample_trajectories, score_trajectory,
                      stop_trajectory)
from .render import render_frame
from .textfusion import load_embeddings
from .world import ScenarioSpec, generate_scene, expert_trajectory
from .planner import RefinementContext


def semantic_loss(outputs, gt, cfg: RunConfig) -> Tensor:
    """Per-class BCE; class weights scale whole channels so rare classes
    count more without shifting the per-pixel decision threshold."""
    targets = gt.semantic.astype(np.float64)
    w = np.asarray(cfg.class_weights, dtype=np.float64).reshape(4, 1, 1)
    weights = np.broadcast_to(w, targets.shape)
    return ad.bce_with_logits(outputs.semantic.logits, targets, weights=weights)


def instance_losses(outputs, gt) -> tuple[Tensor, Tensor, Tensor]:
    t = gt.targets
    heat = ad.focal_bce(outputs.instance.heatmap,
                        t.heatmap[None, :, :])
    mask = t.mask.astype(np.float64)[None, :, :]
    offs = ad.l1_loss(outputs.instance.offsets, t.offsets, mask=mask)
    flow = ad.l1_loss(outputs.instance.flow, t.flow, mask=mask)
    return heat, offs, flow


def costmap_margin_loss(outputs, gt, cfg: RunConfig,
                        candidates: list[Trajectory]) -> Tensor:
    """Max-margin: the expert must undercut every sampled alternative."""
    expert_cost = score_trajectory(gt.expert, outputs.costmap)
    terms = []
    for traj in candidates:
        diff = ad.add(expert_cost,
                      ad.mul(score_trajectory(traj, outputs.costmap), -1.0))
        terms.append(ad.relu(ad.add(diff, cfg.costmap_margin)))
    if not terms:
        return ad.constant(0.0)
    return ad.mul(ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in terms])),
                  1.0 / len(terms))


def _planner_candidates(record: FrameRecord, scene_lane,
                        cfg: RunConfig) -> list[Trajectory]:
    ego = record.gt.expert.states[0]
    try:
        return sample_trajectories(ego, [scene_lane], cfg.sampler_config())
    except EmptySampleSetError:
        return [stop_trajectory(ego)]


class PolyakAverager:
    """Running average of parameters over the tail of training; batch-1
    training at a constant learning rate leaves a noise ball around the
    optimum, and averaging the tail recovers the center."""

    def __init__(self, params: dict, tail: int):
        self.params = params
        self.tail = max(tail, 1)
        self.count = 0
        self.acc = None

    def maybe_accumulate(self, step: int, total_steps: int):
        if step < total_steps - self.tail:
            return
        if self.acc is None:
            self.acc = {k: np.zeros_like(p.data)
                        for k, p in self.params.items()}
        for k, p in self.params.items():
            self.acc[k] += p.data
        self.count += 1

    def apply(self):
        if not self.count:
            return
        for k, p in self.params.items():
            p.data[...] = self.acc[k] / self.count


@dataclass
class StepMetrics:
    step: int
    total: float
    semantic: float
    heatmap: float
    offset: float
    flow: float
    costmap: float

    def line(self) -> str:
        return json.dumps({
            "step": self.step, "loss": round(self.total, 6),
            "semantic": round(self.semantic, 6),
            "heatmap": round(self.heatmap, 6),
            "offset": round(self.offset, 6), "flow": round(self.flow, 6),
            "costmap": round(self.costmap, 6)}, sort_keys=True)


def train_step(model: DrivingModel, record: FrameRecord, cfg: RunConfig,
               opt: nn.Adam, embedding, lane) -> StepMetrics:
    opt.zero_grad()
    outputs = model.forward(record.images, record.poses, embedding)
    sem = semantic_loss(outputs, record.gt, cfg)
    heat, offs, flow = instance_losses(outputs, record.gt)
    lw = cfg.loss_weights
    cost = costmap_margin_loss(outputs, record.gt, cfg,
                               _planner_candidates(record, lane, cfg))
    total = ad.add(
        ad.add(ad.add(ad.mul(sem, lw["semantic"]), ad.mul(heat, lw["heatmap"])),
               ad.add(ad.mul(offs, lw["offset"]), ad.mul(flow, lw["flow"]))),
        ad.mul(cost, lw["costmap"]))
    if not np.isfinite(total.data):
        raise NumericError.in_module("loss")
    total.backward()
    opt.step()
    return StepMetrics(0, total.item(), sem.item(), heat.item(), offs.item(),
                       flow.item(), cost.item())


def _frame_id(seed: int, step: int) -> str:
    return f"{seed:05d}/{step:03d}"


def _lane_from_expert(record: FrameRecord):
    """Ego-frame lane proxy: the expert path extended along its heading.

    The dataset stores the route per scene; for training the expert path
    plus a straight extension is an adequate lane reference and avoids
    re-reading scene.json per step.
    """
    pos = record.gt.expert.positions
    last_yaw = record.gt.expert.states[-1, 2]
    ext = pos[-1] + np.outer(np.arange(1, 30),
                             np.array([np.cos(last_yaw), np.sin(last_yaw)]))
    first_yaw = record.gt.expert.states[0, 2]
    back = pos[0] - np.outer(np.arange(8, 0, -1),
                             np.array([np.cos(first_yaw), np.sin(first_yaw)]))
    pts = np.concatenate([back, pos, ext])
    keep = [0]
    for i in range(1, len(pts)):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) > 0.05:
            keep.append(i)
    pts = pts[keep]
    # resample to ~1 m spacing; raw expert states can be far apart at speed
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    ss = np.arange(0.0, s[-1], 1.0)
    dense = np.stack([np.interp(ss, s, pts[:, 0]),
                      np.interp(ss, s, pts[:, 1])], axis=1)
    from .planner import LaneRef
    return LaneRef(dense)


def run_train(cfg: RunConfig, dataset_dir, out_dir) -> dict:
    """Train on the dataset; writes metrics.jsonl + model.avbw under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(dataset_dir)
    model = DrivingModel(cfg)
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.learning_rate)
    table = None
    if cfg.embedding_source == "file":
        table = load_embeddings(cfg.embedding_file)
    rng = np.random.default_rng(cfg.seed)
    seeds = manifest["train_seeds"]
    steps = list(usable_steps(manifest["scene_duration"]))[cfg.history:]
    averager = PolyakAverager(params, tail=cfg.polyak_tail)
    lines = []
    for step_i in range(cfg.steps):
        seed = seeds[int(rng.integers(len(seeds)))]
        frame_step = steps[int(rng.integers(len(steps)))]
        record = load_frame(dataset_dir, seed, frame_step, cfg.history)
        embedding = embedding_for_captions(cfg, record.captions,
                                           _frame_id(seed, frame_step), table)
        metrics = train_step(model, record, cfg, opt,
                             embedding, _lane_from_expert(record))
        averager.maybe_accumulate(step_i, cfg.steps)
        metrics.step = step_i
        if step_i % cfg.log_every == 0 or step_i == cfg.steps - 1:
            lines.append(metrics.line())
    averager.apply()
    if cfg.refiner_steps > 0:
        refine_stats = train_refiner(cfg, model, steps=cfg.refiner_steps)
        lines.append(json.dumps({"refiner": refine_stats}, sort_keys=True))
    with open(out / "metrics.jsonl", "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    model.save(out / "model.avbw")
    return {"metrics_lines": len(lines), "checkpoint": str(out / "model.avbw")}


# ---------------------------------------------------------------------------
# scripted refiner training on traffic-light scenarios
# ---------------------------------------------------------------------------

def light_scenario(seed: int, light: str, duration: int = 16) -> ScenarioSpec:
    # fixed slow approach: per-step refinement deltas are bounded, so a
    # clean stop is only reachable when one step can cancel the advance
    return ScenarioSpec(seed=seed, duration=duration, layout="intersection",
                        agent_count=0, light_schedule=light,
                        ego_behavior="stop-at-red", ego_speed=0.9)


def refiner_sample(model: DrivingModel, seed: int, light: str):
    """(planned lane-keep, expert, context, ego-frame stop-line x).

    The frame is picked so the stop line sits ~2 m ahead and the horizon
    covers the braking zone; at greater distances the expert never brakes
    within 3 s and refinement has nothing to learn.
    """
    scene = generate_scene(light_scenario(seed, light),
                           image_size=tuple(model.cfg.image_size))
    ahead = scene.stop_line_s - scene.route_s
    candidates_steps = np.nonzero(ahead <= 2.0)[0]
    step = int(candidates_steps[0]) if candidates_steps.size else 0
    step = min(step, scene.duration - PLAN_STEPS - 1)
    lane = scene.lane_ref_at(step)
    ego = (0.0, 0.0, 0.0, float(scene.ego_speeds[step]))
    candidates = sample_trajectories(ego, [lane],
                                     SamplerConfig(lateral_offsets=(0.0,),
                                                   speed_factors=(1.0,),
                                                   include_stop=False))
    planned = candidates[0]
    expert = expert_trajectory(scene, step)
    frame = render_frame(scene, step)
    imgs = ad.constant(frame.images)
    feats, _ = model.encoder(imgs)
    front = ad.reshape(ad.mean_(ad.narrow(feats, 0, 0, 1), axis=(2, 3)),
                       (model.cfg.channels,))
    ctx = RefinementContext(front.data.copy(), light)
    stop_x = float(ahead[step])
    return planned, expert, ctx, stop_x


def refined_position_loss(model: DrivingModel, planned: Trajectory,
                          expert: Trajectory, ctx: RefinementContext) -> Tensor:
    deltas = model.refiner.deltas(planned, ctx)
    terms = []
    for k, d in enumerate(deltas, start=1):
        target = expert.positions[k] - planned.positions[k]
        terms.append(ad.mse_loss(d, target.reshape(1, 2)))
    return ad.mul(ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in terms])),
                  1.0 / len(terms))


def evaluate_refiner(model: DrivingModel, seeds, light: str) -> list[dict]:
    """Stop-line speed and speed retention of refined trajectories."""
    out = []
    for seed in seeds:
        planned, expert, ctx, stop_x = refiner_sample(model, seed, light)
        refined = model.refiner.refine(planned, ctx)
        idx = int(np.argmin(np.abs(refined.positions[:, 0] - stop_x)))
        idx = max(idx, 1)
        out.append({
            "seed": seed,
            "stop_line_speed": float(refined.speeds[idx]),
            "planned_speed": float(planned.speeds[1]),
            "retention": float(refined.speeds[1:].mean()
                               / max(planned.speeds[1:].mean(), 1e-9)),
        })
    return out


def train_refiner(cfg: RunConfig, model: DrivingModel, steps: int = 300,
                  n_scenarios: int = 24) -> dict:
    """Teach the refiner to stop on red and pass on green."""
    opt = nn.Adam(model.refiner.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 31)
    samples = []
    for i in range(n_scenarios):
        light = "red" if i % 2 == 0 else "green"
        samples.append(refiner_sample(model, 9000 + cfg.seed * 131 + i, light))
    losses = []
    for step in range(steps):
        planned, expert, ctx, _ = samples[int(rng.integers(len(samples)))]
        opt.zero_grad()
        loss = refined_position_loss(model, planned, expert, ctx)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return {"steps": steps,
            "first_loss": round(float(np.mean(losses[:10])), 6),
            "last_loss": round(float(np.mean(losses[-10:])), 6)}
