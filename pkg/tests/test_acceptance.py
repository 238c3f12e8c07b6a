"""Acceptance suite: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion. The end-to-end training criteria dominate the runtime (about
25 minutes total on a desktop CPU core).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from avbev import autodiff as ad
from avbev.autodiff import Tensor
from avbev.config import RunConfig
from avbev.dataset import generate_dataset, load_manifest, manifest_hash
from avbev.evaluation import run_eval, write_report
from avbev.geometry import BevGridSpec, frustum_points, splat_to_bev
from avbev.gradsuite import BLOCK_CASES, OP_CASES, check_block, check_op
from avbev.heads import decode_instances, perfect_instance_output, relabel_canonical
from avbev.metrics import iou, panoptic_quality
from avbev.model import DrivingModel
from avbev.planner import (Costmap, EmptySampleSetError, collision_rate,
                           l2_error, sample_trajectories, score_trajectory,
                           select_best, stop_trajectory)
from avbev.render import CLASS_VEHICLE, render_frame
from avbev.temporal import EgoPose, PoseTransform, pose_to_transform, warp_bev
from avbev.training import evaluate_refiner, run_train, train_refiner
from avbev.world import (ScenarioSpec, expert_trajectory, future_occupancy,
                         generate_scene, gt_frame, semantic_masks)

from test_geometry import brute_force_splat
from test_heads import brute_force_decode
from test_temporal import brute_force_warp


def _report(name: str, ok: bool, detail: str = ""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" — {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient suite, every block <= 1e-4, under 2 minutes
# ---------------------------------------------------------------------------

def test_gradient_suite():
    t0 = time.monotonic()
    worst_op = 0.0
    for name in OP_CASES:
        for seed in range(20):
            worst_op = max(worst_op, check_op(name, seed))
    worst_block = 0.0
    for name in BLOCK_CASES:
        worst_block = max(worst_block, check_block(name))
    elapsed = time.monotonic() - t0
    _report("gradient suite: ops over 20 seeds", worst_op <= 1e-4,
            f"max rel err {worst_op:.2e}")
    _report("gradient suite: every differentiable block", worst_block <= 1e-4,
            f"max rel err {worst_block:.2e}")
    _report("gradient suite runtime < 2 min", elapsed < 120.0,
            f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# criterion 2: oracle equivalence
# ---------------------------------------------------------------------------

def test_oracle_equivalence_splat():
    worst = 0.0
    spec = BevGridSpec(extent=12.0, resolution=0.5)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        lifted = rng.standard_normal((3, 4, 3, 5))
        pts = np.stack([rng.uniform(-9, 9, (4, 3, 5)),
                        rng.uniform(-9, 9, (4, 3, 5)),
                        rng.uniform(-4, 6, (4, 3, 5))], axis=-1)
        grid, dropped = splat_to_bev(Tensor(lifted), pts, spec)
        ref, ref_dropped = brute_force_splat(lifted, pts, spec)
        assert dropped == ref_dropped
        worst = max(worst, float(np.abs(grid.features.data - ref).max()))
    _report("oracle equivalence: splat vs brute-force accumulation",
            worst <= 1e-9, f"max abs diff {worst:.2e}")


def test_oracle_equivalence_warp():
    spec = BevGridSpec(extent=12.0, resolution=0.5)
    worst = 0.0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        n = spec.cells_per_side
        feats = rng.standard_normal((2, n, n))
        src = EgoPose(*rng.uniform(-1.5, 1.5, 2), rng.uniform(-0.7, 0.7))
        m = pose_to_transform(src, EgoPose(0, 0, 0))
        from avbev.geometry import BevGrid
        out = warp_bev(BevGrid(Tensor(feats), spec), m).features.data
        ref = brute_force_warp(feats, m, spec)
        inner = (slice(None), slice(2, -2), slice(2, -2))
        worst = max(worst, float(np.abs(out[inner] - ref[inner]).max()))
    _report("oracle equivalence: warp vs brute-force resampler (interior)",
            worst <= 1e-6, f"max abs diff {worst:.2e}")


def test_oracle_equivalence_decode():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        heat = rng.uniform(0, 1, (16, 16))
        offs = rng.uniform(-3, 3, (2, 16, 16))
        np.testing.assert_array_equal(decode_instances((heat, offs)),
                                      brute_force_decode(heat, offs))
    gt = np.zeros((16, 16), dtype=np.int32)
    gt[2:6, 3:7] = 1
    gt[9:13, 10:14] = 2
    ids = decode_instances(perfect_instance_output(gt))
    np.testing.assert_array_equal(relabel_canonical(ids),
                                  relabel_canonical(gt))
    _report("oracle equivalence: instance decoding vs nearest-center oracle",
            True, "exact on 25 random 16x16 instances + GT round trip")


def test_oracle_equivalence_select_best():
    spec = BevGridSpec(extent=40.0, resolution=0.5)
    lane_x = np.arange(-10.0, 50.0, 1.0)
    from avbev.planner import LaneRef
    lane = LaneRef(np.stack([lane_x, np.zeros_like(lane_x)], axis=1))
    for seed in range(10):
        rng = np.random.default_rng(seed)
        costmap = Costmap(rng.uniform(0, 3, (80, 80)), spec)
        trajs = sample_trajectories((0, 0, 0, float(rng.uniform(0.5, 7))),
                                    [lane])
        best = select_best(trajs, costmap)
        scores = [score_trajectory(t, costmap).item() for t in trajs]
        assert score_trajectory(best, costmap).item() == min(scores)
    _report("oracle equivalence: select_best vs exhaustive argmin", True,
            "exact on 10 seeds")


def test_oracle_equivalence_panoptic():
    gt = np.zeros((6, 6), dtype=np.int32)
    gt[0:2, 0:2] = 1
    gt[4:6, 4:6] = 2
    pred = np.zeros_like(gt)
    pred[0:2, 0:2] = 1
    pred[1, 1] = 0
    pred[2, 0] = 1
    pred[4, 0] = 2
    s = panoptic_quality(pred, gt)
    ok = (abs(s.sq - 0.6) < 1e-12 and abs(s.rq - 0.5) < 1e-12
          and abs(s.pq - 0.3) < 1e-12)
    # pq = sq * rq identity on random maps
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 4, (10, 10)).astype(np.int32)
        b = rng.integers(0, 4, (10, 10)).astype(np.int32)
        sc = panoptic_quality(a, b)
        worst = max(worst, abs(sc.pq - sc.sq * sc.rq))
    _report("oracle equivalence: panoptic hand case + pq=sq*rq",
            ok and worst <= 1e-9, f"identity residual {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: geometric consistency with true depth
# ---------------------------------------------------------------------------

def overlap_vehicle_mask(scene, step, spec: BevGridSpec,
                         subsample: int = 3) -> np.ndarray:
    """Cells a vehicle box overlaps anywhere (sub-sampled), the natural
    reference for splatted points, which land in any touched cell."""
    from avbev.world import points_in_box
    n = spec.cells_per_side
    xc, yc = spec.center_grid()
    rot, trans = scene.world_to_ego(step)
    inv = rot.T
    offs = (np.arange(subsample) + 0.5) / subsample - 0.5
    mask = np.zeros((n, n), dtype=bool)
    for a in scene.agents:
        if a.kind != "vehicle":
            continue
        for dx in offs:
            for dy in offs:
                px = xc + dx * spec.resolution
                py = yc + dy * spec.resolution
                wx = inv[0, 0] * px + inv[0, 1] * py + trans[0]
                wy = inv[1, 0] * px + inv[1, 1] * py + trans[1]
                mask |= points_in_box(wx, wy, a.positions[step],
                                      a.yaws[step], a.size)
    return mask


def true_depth_vehicle_iou(seed: int, spec: BevGridSpec) -> float:
    """Lift rendered vehicle pixels with exact ray geometry (mass spread
    over each ray's entry-exit chord through the box, weighted by depth^2
    so mass per ground area is range-independent) and compare the splat
    against the cells vehicles occupy."""
    scene = generate_scene(
        ScenarioSpec(seed=seed, agent_count=3, ego_speed=2.0,
                     spawn_band=(-12.0, 11.0)),
        image_size=(96, 192))
    step = 2
    frame = render_frame(scene, step)
    gt = overlap_vehicle_mask(scene, step, spec)
    bins = np.arange(0.5, 24.0, 0.5)
    d = len(bins)
    n = spec.cells_per_side
    acc = np.zeros((n, n))
    for ci, cam in enumerate(scene.rig):
        h, w = cam.image_size
        veh = frame.class_ids[ci] == CLASS_VEHICLE
        if not veh.any():
            continue
        probs = np.zeros((d, h, w))
        entry, exit_ = frame.box_entry[ci], frame.box_exit[ci]
        for di, b in enumerate(bins):
            probs[di][(entry <= b) & (b <= exit_) & veh] = 1.0
        no_bin = veh & (probs.sum(axis=0) == 0)
        vr, vc = np.nonzero(no_bin)
        nearest = np.clip(np.round((frame.depth[ci][vr, vc] - bins[0])
                                   / 0.5).astype(int), 0, d - 1)
        probs[nearest, vr, vc] = 1.0
        probs *= (bins ** 2).reshape(d, 1, 1)
        pts = frustum_points(cam, bins, h, w, downsample=1)
        grid, _ = splat_to_bev(ad.constant(probs.reshape(1, d, h, w)), pts,
                               spec)
        acc += grid.features.data[0]
    covered = acc[acc > 0]
    if covered.size == 0:
        return 1.0 if gt.sum() == 0 else 0.0
    threshold = 0.05 * covered.mean()
    return iou(acc >= threshold, gt)


def test_geometric_consistency_20_seeds():
    t0 = time.monotonic()
    spec = BevGridSpec(extent=32.0, resolution=0.5)
    scores = [true_depth_vehicle_iou(seed, spec) for seed in range(20)]
    elapsed = time.monotonic() - t0
    worst = min(scores)
    _report("geometric consistency: true-depth lift+splat IoU >= 0.7 on 20 "
            "seeds", worst >= 0.7,
            f"min {worst:.3f}, mean {np.mean(scores):.3f}")
    _report("geometric consistency runtime < 3 min", elapsed < 180.0,
            f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# criterion 6: planner suite
# ---------------------------------------------------------------------------

def _inflated_costmap(occupancy: np.ndarray, spec: BevGridSpec) -> Costmap:
    """High cost on future-occupied cells inflated by the ego half-diagonal."""
    occupied = occupancy.any(axis=0)
    cost = np.zeros(occupied.shape)
    radius = int(np.ceil(2.2 / spec.resolution))
    rr, cc = np.nonzero(occupied)
    n = spec.cells_per_side
    for r, c in zip(rr, cc):
        r0, r1 = max(r - radius, 0), min(r + radius + 1, n)
        c0, c1 = max(c - radius, 0), min(c + radius + 1, n)
        cost[r0:r1, c0:c1] = 5.0
    return Costmap(cost, spec)


def test_planner_suite():
    spec = BevGridSpec(extent=32.0, resolution=0.5)
    lane_keep_present = True
    collisions = []
    for seed in range(20):
        scene = generate_scene(ScenarioSpec(seed=seed, layout="corridor",
                                            agent_count=3))
        step = 0
        occ = future_occupancy(scene, step, spec)
        lane = scene.lane_ref_at(step)
        ego = (0.0, 0.0, 0.0, float(scene.ego_speeds[step]))
        try:
            candidates = sample_trajectories(ego, [lane])
        except EmptySampleSetError:
            candidates = [stop_trajectory(ego)]
        lane_keep_present &= any(
            t.lateral_offset == 0.0 and t.profile == "target:1"
            for t in candidates)
        best = select_best(candidates, _inflated_costmap(occ, spec))
        cr = collision_rate(best, occ, spec)
        collisions.append(cr["3s"])
    _report("planner: corridor CR = 0% on all 20 seeds",
            all(c == 0.0 for c in collisions), f"CRs {sorted(set(collisions))}")
    _report("planner: lane-keep candidate always present", lane_keep_present)
    # expert-vs-expert L2 is exactly zero
    scene = generate_scene(ScenarioSpec(seed=3))
    expert = expert_trajectory(scene, 2)
    l2 = l2_error(expert, expert)
    _report("planner: L2 of expert-vs-expert = 0",
            all(v == 0.0 for v in l2.values()), str(l2))


def test_planner_refinement_traffic_lights():
    cfg = RunConfig()
    model = DrivingModel(cfg)
    t0 = time.monotonic()
    train_refiner(cfg, model, steps=800, n_scenarios=32)
    red = evaluate_refiner(model, [777001 + i for i in range(10)], "red")
    green = evaluate_refiner(model, [888001 + i for i in range(10)], "green")
    elapsed = time.monotonic() - t0
    worst_stop = max(r["stop_line_speed"] for r in red)
    worst_keep = min(g["retention"] for g in green)
    _report("planner: red-light stop-line speed < 0.5 m/s",
            worst_stop < 0.5, f"max {worst_stop:.3f} m/s "
            f"(refiner train+eval {elapsed:.0f} s)")
    _report("planner: green-light speed retention >= 80%",
            worst_keep >= 0.8, f"min {worst_keep:.3f}")


# ---------------------------------------------------------------------------
# criterion 7: determinism of generate + train + eval
# ---------------------------------------------------------------------------

def test_determinism_bitwise(tmp_path):
    cfg = RunConfig(n_train_scenes=3, n_val_scenes=2, scene_duration=10,
                    steps=12, log_every=4, image_size=[32, 64], channels=8,
                    depth_bins=10, enc_width1=6, enc_width2=8, head_hidden=8,
                    cost_hidden=6, embed_dim=16, grid_extent=24.0)
    reports = []
    for run in ("a", "b"):
        data = tmp_path / f"data_{run}"
        out = tmp_path / f"run_{run}"
        m = generate_dataset(cfg, data)
        run_train(cfg, data, out)
        rep = run_eval(cfg, data, checkpoint=out / "model.avbw")
        write_report(rep, out / "report.json")
        reports.append((manifest_hash(m),
                        (out / "metrics.jsonl").read_bytes(),
                        (out / "model.avbw").read_bytes(),
                        (out / "report.json").read_bytes()))
    same = all(a == b for a, b in zip(reports[0], reports[1]))
    _report("determinism: generate+train+eval bitwise identical", same,
            "manifest hash, metrics log, checkpoint and report all match")


# ---------------------------------------------------------------------------
# criterion 5: fusion efficacy on the attended-class task
# ---------------------------------------------------------------------------

FUSION_CFG = RunConfig(n_train_scenes=64, n_val_scenes=12, steps=800,
                       log_every=200, ambiguous_scenes=True,
                       layout_mix={"straight": 1.0}, agents_min=2,
                       agents_max=4)


def test_fusion_efficacy(tmp_path):
    data = tmp_path / "ambig"
    generate_dataset(FUSION_CFG, data)
    scores = {}
    for mode, enabled in (("on", True), ("off", False)):
        cfg = FUSION_CFG.with_overrides(text_enabled=enabled)
        out = tmp_path / f"run_{mode}"
        run_train(cfg, data, out)
        rep = run_eval(cfg, data, checkpoint=out / "model.avbw",
                       text_mode=mode)
        scores[mode] = rep["iou"]["vehicle"]
    gap = 100.0 * (scores["on"] - scores["off"])
    _report("fusion efficacy: text-on beats gate-closed by >= 5 IoU points",
            gap >= 5.0,
            f"on {scores['on']:.3f}, off {scores['off']:.3f}, "
            f"gap {gap:.1f} points")


# ---------------------------------------------------------------------------
# criterion 4: toy end-to-end perception at the default config
# ---------------------------------------------------------------------------

def test_toy_end_to_end_perception(tmp_path):
    cfg = RunConfig()       # 256 train scenes, 2000 steps, seed 7
    data = tmp_path / "default"
    t_gen0 = time.monotonic()
    generate_dataset(cfg, data)
    t_gen = time.monotonic() - t_gen0
    t0 = time.monotonic()
    run_train(cfg, data, tmp_path / "run")
    rep = run_eval(cfg, data, checkpoint=tmp_path / "run" / "model.avbw")
    elapsed = time.monotonic() - t0
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    by_step = {json.loads(l)["step"]: json.loads(l)["loss"] for l in lines}
    early = by_step[50]
    late = by_step[max(by_step)]
    _report("generate: default 256-scene training set < 5 min",
            t_gen < 300.0, f"{t_gen / 60:.1f} min")
    _report("toy end-to-end: vehicle IoU >= 0.85",
            rep["iou"]["vehicle"] >= 0.85, f"{rep['iou']['vehicle']:.3f}")
    _report("toy end-to-end: drivable IoU >= 0.90",
            rep["iou"]["drivable"] >= 0.90, f"{rep['iou']['drivable']:.3f}")
    _report("toy end-to-end: train+eval <= 15 min", elapsed <= 900.0,
            f"{elapsed / 60:.1f} min")
    _report("training loss at final step < 0.5x loss at step 50",
            late < 0.5 * early, f"{early:.3f} -> {late:.3f}")
