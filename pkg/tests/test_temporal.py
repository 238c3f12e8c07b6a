"""Ego-motion warping and temporal fusion."""

import numpy as np
import pytest

from avbev import autodiff as ad
from avbev.autodiff import Tensor
from avbev.geometry import BevGrid, BevGridSpec
from avbev.temporal import (BevSequence, EgoPose, PoseTransform, TemporalFuser,
                            pose_to_transform, warp_bev)

SPEC = BevGridSpec(extent=12.0, resolution=0.5)   # 24x24


def brute_force_warp(features: np.ndarray, transform: PoseTransform,
                     spec: BevGridSpec) -> np.ndarray:
    """Per-cell loop resampler used as the oracle."""
    c, n, _ = features.shape
    inv = transform.inverse().matrix
    out = np.zeros_like(features)
    for r in range(n):
        for col in range(n):
            x, y = spec.cell_center(r, col)
            sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 3]
            sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 3]
            rf = n / 2.0 - sx / spec.resolution - 0.5
            cf = n / 2.0 - sy / spec.resolution - 0.5
            r0, c0 = int(np.floor(rf)), int(np.floor(cf))
            fr, fc = rf - r0, cf - c0
            for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)),
                                (0, 1, (1 - fr) * fc),
                                (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
                rr, cc = r0 + dr, c0 + dc
                if 0 <= rr < n and 0 <= cc < n:
                    out[:, r, col] += wgt * features[:, rr, cc]
    return out


def _grid(data):
    return BevGrid(Tensor(data), SPEC)


def _rand_grid(seed, channels=2):
    rng = np.random.default_rng(seed)
    n = SPEC.cells_per_side
    return _grid(rng.standard_normal((channels, n, n)))


# ---------------------------------------------------------------------------
# pose transforms
# ---------------------------------------------------------------------------

def test_identity_pose_transform():
    p = EgoPose(3.0, -1.0, 0.7, t=1.0)
    m = pose_to_transform(p, EgoPose(3.0, -1.0, 0.7, t=1.5))
    np.testing.assert_allclose(m.matrix, np.eye(4), atol=1e-12)


def test_one_meter_behind():
    src = EgoPose(-1.0, 0.0, 0.0)
    dst = EgoPose(0.0, 0.0, 0.0)
    m = pose_to_transform(src, dst)
    np.testing.assert_allclose(m.matrix[:2, 3], [-1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_transform_times_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    src = EgoPose(*rng.uniform(-10, 10, 2), rng.uniform(-np.pi, np.pi))
    dst = EgoPose(*rng.uniform(-10, 10, 2), rng.uniform(-np.pi, np.pi))
    m = pose_to_transform(src, dst)
    np.testing.assert_allclose(m.matrix @ m.inverse().matrix, np.eye(4),
                               atol=1e-12)


def test_world_point_consistency():
    # a fixed world point maps consistently through both ego frames
    src = EgoPose(2.0, 1.0, 0.3)
    dst = EgoPose(4.0, -1.0, -0.5)
    world = np.array([7.0, 3.0, 0.0, 1.0])
    in_src = np.linalg.inv(src.matrix()) @ world
    in_dst = np.linalg.inv(dst.matrix()) @ world
    np.testing.assert_allclose(pose_to_transform(src, dst).matrix @ in_src,
                               in_dst, atol=1e-12)


def test_yaw_wrapping():
    assert EgoPose(0, 0, 3 * np.pi).yaw == pytest.approx(np.pi)
    assert EgoPose(0, 0, -np.pi).yaw == pytest.approx(np.pi)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def test_identity_warp_exact():
    g = _rand_grid(0)
    out = warp_bev(g, PoseTransform(np.eye(4)))
    np.testing.assert_allclose(out.features.data, g.features.data, atol=1e-12)


def test_grid_aligned_shift_exact():
    g = _rand_grid(1)
    m = np.eye(4)
    m[0, 3] = SPEC.resolution          # +0.5 m along x, one cell
    out = warp_bev(g, PoseTransform(m)).features.data
    src = g.features.data
    np.testing.assert_allclose(out[:, :-1, :], src[:, 1:, :], atol=1e-12)
    assert np.all(out[:, -1, :] == 0.0)


def test_quarter_turn_symmetric_pattern_unchanged():
    rng = np.random.default_rng(2)
    n = SPEC.cells_per_side
    base = rng.standard_normal((n, n))
    sym = base + np.rot90(base) + np.rot90(base, 2) + np.rot90(base, 3)
    g = _grid(sym[None])
    src = EgoPose(0, 0, np.pi / 2)
    out = warp_bev(g, pose_to_transform(src, EgoPose(0, 0, 0)))
    inner = (slice(2, -2), slice(2, -2))
    np.testing.assert_allclose(out.features.data[0][inner], sym[inner],
                               atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_warp_matches_brute_force(seed):
    rng = np.random.default_rng(seed + 100)
    g = _rand_grid(seed + 10)
    src = EgoPose(*rng.uniform(-1.5, 1.5, 2), rng.uniform(-0.6, 0.6))
    m = pose_to_transform(src, EgoPose(0, 0, 0))
    out = warp_bev(g, m).features.data
    ref = brute_force_warp(g.features.data, m, SPEC)
    assert np.abs(out - ref).max() <= 1e-6


def test_nonplanar_transform_rejected():
    m = np.eye(4)
    m[2, 3] = 1.0    # z translation
    with pytest.raises(ValueError, match="planar"):
        warp_bev(_rand_grid(3), PoseTransform(m))
    rot = np.eye(4)
    a = 0.3
    rot[1, 1], rot[1, 2], rot[2, 1], rot[2, 2] = \
        np.cos(a), -np.sin(a), np.sin(a), np.cos(a)   # x-axis rotation
    with pytest.raises(ValueError, match="planar"):
        warp_bev(_rand_grid(3), PoseTransform(rot))


def test_warp_composition_interior():
    # needs a smooth field: composition consistency is limited by bilinear
    # interpolation error, which is unbounded for white-noise content
    spec = BevGridSpec(extent=80.0, resolution=0.5)
    n = spec.cells_per_side
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    field = (np.sin(2 * np.pi * rr / 160.0) * np.cos(2 * np.pi * cc / 150.0)
             + 0.4 * np.sin(2 * np.pi * (rr + cc) / 200.0))
    g = BevGrid(Tensor(field[None]), spec)
    p0 = EgoPose(0, 0, 0)
    p1 = EgoPose(0.3, -0.2, 0.01)
    p2 = EgoPose(-0.25, 0.4, -0.015)
    m1 = pose_to_transform(p1, p0)
    m2 = pose_to_transform(p2, p0)
    two_step = warp_bev(warp_bev(g, m1), m2).features.data
    composed = PoseTransform(m2.matrix @ m1.matrix)
    one_step = warp_bev(g, composed).features.data
    inner = (slice(None), slice(2, -2), slice(2, -2))
    assert np.abs(two_step[inner] - one_step[inner]).max() <= 1e-3


@pytest.mark.parametrize("case", ["rot30", "rot45", "rot90", "trans", "mix"])
def test_warp_never_increases_total_mass(case):
    rng = np.random.default_rng(hash(case) % 2**31)
    g = _rand_grid(int(rng.integers(100)), channels=3)
    yaw = {"rot30": np.pi / 6, "rot45": np.pi / 4, "rot90": np.pi / 2,
           "trans": 0.0, "mix": 0.37}[case]
    t = (0.0, 0.0) if case.startswith("rot") else (1.3, -0.7)
    src = EgoPose(t[0], t[1], yaw)
    out = warp_bev(g, pose_to_transform(src, EgoPose(0, 0, 0)))
    assert np.abs(out.features.data).sum() <= np.abs(g.features.data).sum() + 1e-9


# ---------------------------------------------------------------------------
# sequences and fusion
# ---------------------------------------------------------------------------

def _sequence(seed, h=2, zeros=False):
    rng = np.random.default_rng(seed)
    grids, poses = [], []
    n = SPEC.cells_per_side
    for i in range(h + 1):
        data = np.zeros((3, n, n)) if zeros else rng.standard_normal((3, n, n))
        grids.append(BevGrid(Tensor(data), SPEC, t=0.5 * i))
        poses.append(EgoPose(0.6 * i, 0.0, 0.0, t=0.5 * i))
    return BevSequence(grids, poses)


def test_sequence_spacing_validated():
    g = [_rand_grid(i) for i in range(2)]
    poses = [EgoPose(0, 0, 0, t=0.0), EgoPose(0, 0, 0, t=0.7)]
    with pytest.raises(ValueError, match="apart"):
        BevSequence(g, poses)


def test_fuse_zero_frames_finite():
    rng = np.random.default_rng(20)
    fuser = TemporalFuser(rng, channels=3, history=2)
    out = fuser(_sequence(0, zeros=True))
    assert np.isfinite(out.features.data).all()
    n = SPEC.cells_per_side
    assert out.features.shape == (3, n, n)


def test_fuse_single_frame_history_zero():
    rng = np.random.default_rng(21)
    fuser = TemporalFuser(rng, channels=3, history=0)
    seq = _sequence(1, h=0)
    out = fuser(seq)
    assert out.features.shape == seq.grids[0].features.shape
    # a pure function of the current frame only
    out2 = fuser(BevSequence([seq.grids[0]], [seq.poses[0]]))
    np.testing.assert_array_equal(out.features.data, out2.features.data)


def test_fuse_wrong_length_rejected():
    rng = np.random.default_rng(22)
    fuser = TemporalFuser(rng, channels=3, history=2)
    seq = _sequence(2, h=1)
    with pytest.raises(ValueError, match="h="):
        fuser(seq)


def test_fuse_sensitive_to_temporal_order():
    rng = np.random.default_rng(23)
    fuser = TemporalFuser(rng, channels=3, history=2)
    seq = _sequence(3)
    out = fuser.fuse_aligned(seq.grids)
    swapped = [seq.grids[1], seq.grids[0], seq.grids[2]]
    out_swapped = fuser.fuse_aligned(swapped)
    assert np.abs(out.features.data - out_swapped.features.data).max() > 1e-6
