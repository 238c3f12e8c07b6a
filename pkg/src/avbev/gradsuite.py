"""Finite-difference verification cases for every op and learnable block.

Each case builds a tiny randomized instance and funnels the output through
a fixed random linear functional so grad_check sees a scalar loss.  Ops
with gradient kinks (relu, l1) are sampled away from the kink, since the
subgradient choice there is arbitrary.

The block cases mirror the trainable pieces of the full pipeline at toy
sizes: encoder, lift+splat, warp, temporal fusion, text conditioning,
perception heads, costmap head and the trajectory refiner.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, grad_check
from .geometry import (BevGrid, BevGridSpec, DepthDistribution, ImageEncoder,
                       build_ring_rig, frustum_points, lift_features,
                       normalize_depth, splat_to_bev)
from .heads import InstanceHead, SemanticHead
from .planner import (Costmap, CostmapHead, RefinementContext, ScoreWeights,
                      Trajectory, TrajectoryRefiner, score_trajectory)
from .temporal import EgoPose, TemporalFuser, pose_to_transform, warp_bev
from .textfusion import (FilmMlp, FusionGate, TextEmbedding, modulate,
                         weighted_fuse)


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_kink(arr, margin=0.15):
    return np.where(np.abs(arr) < margin, arr + np.sign(arr + 0.5) * margin, arr)


def _scalarize(out: Tensor, rng) -> Tensor:
    w = ad.constant(rng.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, w))


# ---------------------------------------------------------------------------
# op-level cases: name -> fn(rng) -> (loss_fn, [input tensors])
# ---------------------------------------------------------------------------

def _case_add(rng):
    a, b = Tensor(_rand(rng, 3, 4)), Tensor(_rand(rng, 3, 4))
    return lambda p: _scalarize(ad.add(p[0], p[1]), np.random.default_rng(0)), [a, b]


def _case_broadcast_add(rng):
    a, b = Tensor(_rand(rng, 3, 4, 5)), Tensor(_rand(rng, 4, 1))
    return lambda p: _scalarize(ad.add(p[0], p[1]), np.random.default_rng(0)), [a, b]


def _case_mul(rng):
    a, b = Tensor(_rand(rng, 2, 5)), Tensor(_rand(rng, 2, 5))
    return lambda p: _scalarize(ad.mul(p[0], p[1]), np.random.default_rng(0)), [a, b]


def _case_broadcast_mul(rng):
    a, b = Tensor(_rand(rng, 2, 3, 4)), Tensor(_rand(rng, 3, 1))
    return lambda p: _scalarize(ad.mul(p[0], p[1]), np.random.default_rng(0)), [a, b]


def _case_matmul(rng):
    a, b = Tensor(_rand(rng, 3, 4)), Tensor(_rand(rng, 4, 2))
    return lambda p: _scalarize(ad.matmul(p[0], p[1]), np.random.default_rng(0)), [a, b]


def _case_relu(rng):
    x = Tensor(_away_from_kink(_rand(rng, 4, 4)))
    return lambda p: _scalarize(ad.relu(p[0]), np.random.default_rng(0)), [x]


def _case_sigmoid(rng):
    x = Tensor(_rand(rng, 3, 5))
    return lambda p: _scalarize(ad.sigmoid(p[0]), np.random.default_rng(0)), [x]


def _case_tanh(rng):
    x = Tensor(_rand(rng, 3, 5))
    return lambda p: _scalarize(ad.tanh(p[0]), np.random.default_rng(0)), [x]


def _case_softmax(rng):
    x = Tensor(_rand(rng, 3, 4, 2))
    return lambda p: _scalarize(ad.softmax(p[0], axis=1),
                                np.random.default_rng(0)), [x]


def _case_conv2d(rng):
    x = Tensor(_rand(rng, 2, 3, 6, 7))
    w = Tensor(_rand(rng, 4, 3, 3, 3) * 0.5)
    b = Tensor(_rand(rng, 4))
    return (lambda p: _scalarize(ad.conv2d(p[0], p[1], p[2], stride=2, padding=1),
                                 np.random.default_rng(0)), [x, w, b])


def _case_mse(rng):
    x = Tensor(_rand(rng, 3, 4))
    t = _rand(rng, 3, 4)
    return lambda p: ad.mse_loss(p[0], t), [x]


def _case_bce(rng):
    x = Tensor(_rand(rng, 3, 4))
    t = rng.uniform(0, 1, (3, 4))
    w = rng.uniform(0.2, 2.0, (3, 4))
    return lambda p: ad.bce_with_logits(p[0], t, weights=w), [x]


def _case_focal_bce(rng):
    x = Tensor(_rand(rng, 3, 4))
    t = rng.uniform(0, 1, (3, 4))
    return lambda p: ad.focal_bce(p[0], t), [x]


def _case_l1(rng):
    t = _rand(rng, 3, 4)
    x = Tensor(t + _away_from_kink(_rand(rng, 3, 4)))
    m = (rng.uniform(0, 1, (3, 4)) > 0.4).astype(float)
    return lambda p: ad.l1_loss(p[0], t, mask=m), [x]


def _case_sum(rng):
    x = Tensor(_rand(rng, 2, 3, 4))
    return lambda p: _scalarize(ad.sum_(p[0], axis=1), np.random.default_rng(0)), [x]


def _case_mean(rng):
    x = Tensor(_rand(rng, 2, 3, 4))
    return lambda p: _scalarize(ad.mean_(p[0], axis=(1, 2)),
                                np.random.default_rng(0)), [x]


def _case_reshape_concat_narrow(rng):
    a, b = Tensor(_rand(rng, 2, 6)), Tensor(_rand(rng, 3, 6))
    def fn(p):
        cat = ad.concat([p[0], p[1]], axis=0)
        sl = ad.narrow(cat, 0, 1, 3)
        return _scalarize(ad.reshape(sl, (6, 3)), np.random.default_rng(0))
    return fn, [a, b]


def _case_upsample2x(rng):
    x = Tensor(_rand(rng, 2, 3, 4, 5))
    return lambda p: _scalarize(ad.upsample2x(p[0]), np.random.default_rng(0)), [x]


def _case_bilinear_gather(rng):
    x = Tensor(_rand(rng, 2, 6, 7))
    rows = rng.uniform(-1.0, 6.5, 9)
    cols = rng.uniform(-1.0, 7.5, 9)
    # keep samples off exact knots: the interpolant is only C0 there
    rows = np.where(np.abs(rows - np.round(rows)) < 0.05, rows + 0.1, rows)
    cols = np.where(np.abs(cols - np.round(cols)) < 0.05, cols + 0.1, cols)
    return (lambda p: _scalarize(ad.bilinear_gather(p[0], rows, cols),
                                 np.random.default_rng(0)), [x])


def _case_scatter_columns(rng):
    x = Tensor(_rand(rng, 3, 10))
    idx = rng.integers(0, 5, 10)
    return (lambda p: _scalarize(ad.scatter_columns(p[0], idx, 5),
                                 np.random.default_rng(0)), [x])


OP_CASES = {
    "add": _case_add,
    "broadcast_add": _case_broadcast_add,
    "mul": _case_mul,
    "broadcast_mul": _case_broadcast_mul,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "tanh": _case_tanh,
    "softmax": _case_softmax,
    "conv2d": _case_conv2d,
    "mse_loss": _case_mse,
    "bce_with_logits": _case_bce,
    "focal_bce": _case_focal_bce,
    "l1_loss": _case_l1,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape_concat_narrow": _case_reshape_concat_narrow,
    "upsample2x": _case_upsample2x,
    "bilinear_gather": _case_bilinear_gather,
    "scatter_columns": _case_scatter_columns,
}


def check_op(name: str, seed: int = 0, eps: float = 1e-6) -> float:
    fn, points = OP_CASES[name](np.random.default_rng(seed))
    return grad_check(fn, points, eps=eps)


# ---------------------------------------------------------------------------
# block-level cases
# ---------------------------------------------------------------------------

_TINY_GRID = BevGridSpec(extent=6.0, resolution=0.5)   # 12x12 cells


def _tiny_grid(rng, channels=3) -> BevGrid:
    n = _TINY_GRID.cells_per_side
    return BevGrid(Tensor(_rand(rng, channels, n, n)), _TINY_GRID)


def _params_list(params: dict) -> list[Tensor]:
    return [params[k] for k in sorted(params)]


def _block_encoder(rng):
    enc = ImageEncoder(rng, channels=5, depth_bins=4, width1=4, width2=5)
    img = ad.constant(rng.uniform(0, 1, (1, 3, 16, 24)))
    srng = np.random.default_rng(1)
    def fn(_):
        feats, dlog = enc(img)
        return ad.add(_scalarize(feats, np.random.default_rng(2)),
                      _scalarize(dlog, np.random.default_rng(3)))
    return fn, _params_list(enc.parameters())


def _block_lift_splat(rng):
    cam = build_ring_rig(1, image_size=(16, 24))[0]
    bins = np.array([2.0, 5.0, 9.0])
    he, we = 2, 3
    pts = frustum_points(cam, bins, he, we)
    feats = Tensor(_rand(rng, 3, he, we))
    dlog = Tensor(_rand(rng, 3, he, we))
    spec = BevGridSpec(extent=20.0, resolution=0.5)
    def fn(p):
        depth = normalize_depth(p[1], bins)
        lifted = lift_features(p[0], depth)
        grid, _ = splat_to_bev(lifted, pts, spec)
        return _scalarize(grid.features, np.random.default_rng(4))
    return fn, [feats, dlog]


def _block_warp(rng):
    grid = _tiny_grid(rng, channels=2)
    m = pose_to_transform(EgoPose(0.3, -0.2, 0.15), EgoPose(0.0, 0.0, 0.0))
    def fn(p):
        g = BevGrid(p[0], _TINY_GRID)
        return _scalarize(warp_bev(g, m).features, np.random.default_rng(5))
    return fn, [grid.features]


def _block_fuse_temporal(rng):
    fuser = TemporalFuser(rng, channels=3, history=2)
    grids = [_tiny_grid(rng, 3) for _ in range(3)]
    def fn(_):
        out = fuser.fuse_aligned(grids)
        return _scalarize(out.features, np.random.default_rng(6))
    return fn, _params_list(fuser.parameters())


def _block_text_fusion(rng):
    film = FilmMlp(rng, embed_dim=5, channels=3)
    # zero-init output layer defeats a gradient check; randomize it here
    film.mlp.fc2.w.data[...] = _rand(rng, *film.mlp.fc2.w.shape) * 0.3
    film.mlp.fc2.b.data[...] = _rand(rng, *film.mlp.fc2.b.shape) * 0.3
    gate = FusionGate(3)
    gate.logits.data[...] = _rand(rng, 3) * 0.5
    grid = _tiny_grid(rng, 3)
    vec = rng.standard_normal(5)
    embed = Tensor(vec / np.linalg.norm(vec))
    points = [embed] + _params_list({**film.parameters(), **gate.parameters()})
    def fn(p):
        fp = film(p[0])
        fused = weighted_fuse(grid, modulate(grid, fp), gate)
        return _scalarize(fused.features, np.random.default_rng(7))
    return fn, points


def _block_semantic_head(rng):
    head = SemanticHead(rng, channels=3, n_classes=2, hidden=4)
    grid = _tiny_grid(rng, 3)
    def fn(_):
        return _scalarize(head(grid).logits, np.random.default_rng(8))
    return fn, _params_list(head.parameters())


def _block_instance_head(rng):
    head = InstanceHead(rng, channels=3, hidden=4)
    grid = _tiny_grid(rng, 3)
    def fn(_):
        out = head(grid, raw_heat=True)
        return ad.add(ad.add(_scalarize(out.heatmap, np.random.default_rng(9)),
                             _scalarize(out.offsets, np.random.default_rng(10))),
                      _scalarize(out.flow, np.random.default_rng(11)))
    return fn, _params_list(head.parameters())


def _block_costmap_head(rng):
    head = CostmapHead(rng, channels=3, hidden=4)
    grid = _tiny_grid(rng, 3)
    states = np.zeros((7, 4))
    states[:, 0] = np.linspace(0.0, 1.8, 7)
    states[:, 3] = 0.6
    traj = Trajectory(states)
    def fn(_):
        return score_trajectory(traj, head(grid), ScoreWeights())
    return fn, _params_list(head.parameters())


def _block_refiner(rng):
    refiner = TrajectoryRefiner(rng, front_dim=4, hidden=5)
    refiner.out.w.data[...] = _rand(rng, *refiner.out.w.shape) * 0.3
    refiner.out.b.data[...] = _rand(rng, *refiner.out.b.shape) * 0.3
    states = np.zeros((7, 4))
    states[:, 0] = np.linspace(0.0, 3.0, 7)
    states[:, 3] = 1.0
    traj = Trajectory(states)
    ctx = RefinementContext(rng.standard_normal(4), "red")
    def fn(_):
        deltas = refiner.deltas(traj, ctx)
        return _scalarize(ad.concat(deltas, axis=0), np.random.default_rng(12))
    return fn, _params_list(refiner.parameters())


BLOCK_CASES = {
    "encoder": _block_encoder,
    "lift_splat": _block_lift_splat,
    "warp": _block_warp,
    "fuse_temporal": _block_fuse_temporal,
    "text_fusion": _block_text_fusion,
    "semantic_head": _block_semantic_head,
    "instance_head": _block_instance_head,
    "costmap_head": _block_costmap_head,
    "refiner": _block_refiner,
}


def check_block(name: str, seed: int = 0, eps: float = 1e-6) -> float:
    fn, points = BLOCK_CASES[name](np.random.default_rng(seed))
    return grad_check(fn, points, eps=eps)


def run_full_suite(op_seeds: int = 20, tol: float = 1e-4) -> dict[str, float]:
    """Every op over many seeds, every block once; returns max error each."""
    report: dict[str, float] = {}
    for name in OP_CASES:
        worst = 0.0
        for seed in range(op_seeds):
            worst = max(worst, check_op(name, seed))
        report[f"op:{name}"] = worst
    for name in BLOCK_CASES:
        report[f"block:{name}"] = check_block(name)
    return report
