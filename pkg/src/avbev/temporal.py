"""Ego-motion alignment of historical BEV grids and spatiotemporal fusion.

Historical grids are resampled into the current ego frame with a rigid
ground-plane warp, then fused by per-frame projections, concatenation, a
3x3 convolution and a channel-attention gate.  Per-frame projection weights
are distinct, so the fusion is sensitive to temporal order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import BevGrid, BevGridSpec

FRAME_DT = 0.5   # seconds between BEV frames (2 Hz)


@dataclass(frozen=True)
class EgoPose:
    """World-frame planar pose; yaw wrapped to (-pi, pi]."""

    x: float
    y: float
    yaw: float
    t: float = 0.0

    def __post_init__(self):
        wrapped = np.arctan2(np.sin(self.yaw), np.cos(self.yaw))
        if wrapped <= -np.pi:
            wrapped = np.pi
        object.__setattr__(self, "yaw", float(wrapped))

    def matrix(self) -> np.ndarray:
        """4x4 transform from this ego frame into the world frame."""
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        m = np.eye(4)
        m[0, 0], m[0, 1] = cy, -sy
        m[1, 0], m[1, 1] = sy, cy
        m[0, 3], m[1, 3] = self.x, self.y
        return m


@dataclass
class PoseTransform:
    """Rigid transform taking source-frame coordinates into the target frame."""

    matrix: np.ndarray   # (4, 4)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        r = self.matrix[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("PoseTransform rotation is not orthonormal")
        if np.abs(self.matrix[3] - np.array([0, 0, 0, 1.0])).max() > 1e-12:
            raise ValueError("PoseTransform bottom row must be (0,0,0,1)")

    def inverse(self) -> "PoseTransform":
        inv = np.eye(4)
        r = self.matrix[:3, :3]
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ self.matrix[:3, 3]
        return PoseTransform(inv)

    def is_planar(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        return (abs(m[2, 2] - 1.0) <= tol and abs(m[0, 2]) <= tol
                and abs(m[1, 2]) <= tol and abs(m[2, 0]) <= tol
                and abs(m[2, 1]) <= tol and abs(m[2, 3]) <= tol)


def pose_to_transform(src: EgoPose, dst: EgoPose) -> PoseTransform:
    """Transform mapping src-frame coordinates into the dst frame."""
    dst_m = dst.matrix()
    inv = np.eye(4)
    r = dst_m[:3, :3]
    inv[:3, :3] = r.T
    inv[:3, 3] = -r.T @ dst_m[:3, 3]
    return PoseTransform(inv @ src.matrix())


def warp_bev(grid: BevGrid, transform: PoseTransform) -> BevGrid:
    """Resample a source-frame grid into the target frame of ``transform``.

    Each target cell takes the bilinear sample of the source grid at the
    back-projected cell center; samples outside the source are zero.
    Differentiable w.r.t. the grid features.
    """
    if not transform.is_planar(tol=1e-6):
        raise ValueError("warp_bev requires a planar (z-rotation + xy) transform")
    spec = grid.spec
    xc, yc = spec.center_grid()
    inv = transform.inverse().matrix
    src_x = inv[0, 0] * xc + inv[0, 1] * yc + inv[0, 3]
    src_y = inv[1, 0] * xc + inv[1, 1] * yc + inv[1, 3]
    rows, cols = spec.fractional_cell(src_x, src_y)
    n = spec.cells_per_side
    sampled = ad.bilinear_gather(grid.features, rows.ravel(), cols.ravel())
    return BevGrid(ad.reshape(sampled, (grid.channels, n, n)), spec, t=grid.t)


@dataclass
class BevSequence:
    """Oldest-first stack of h+1 grids with matching poses."""

    grids: list[BevGrid]
    poses: list[EgoPose]

    def __post_init__(self):
        if len(self.grids) != len(self.poses):
            raise ValueError("grids and poses must pair up")
        if not self.grids:
            raise ValueError("empty sequence")
        spec = self.grids[0].spec
        c = self.grids[0].channels
        for g in self.grids:
            if g.spec != spec or g.channels != c:
                raise ValueError("all grids must share spec and channel count")
        ts = [p.t for p in self.poses]
        if any(abs((b - a) - FRAME_DT) > 1e-9 for a, b in zip(ts, ts[1:])):
            raise ValueError(f"poses must be {FRAME_DT}s apart, got {ts}")

    @property
    def history(self) -> int:
        return len(self.grids) - 1


def align_sequence(seq: BevSequence) -> list[BevGrid]:
    """Warp every historical grid into the most recent frame."""
    current = seq.poses[-1]
    out = []
    for g, p in zip(seq.grids[:-1], seq.poses[:-1]):
        out.append(warp_bev(g, pose_to_transform(p, current)))
    out.append(seq.grids[-1])
    return out


class TemporalFuser:
    """Fuse h+1 aligned grids into one: per-frame 1x1 conv -> concat ->
    3x3 conv -> channel gate."""

    def __init__(self, rng, channels: int, history: int, name: str = "fuse"):
        self.channels = channels
        self.history = history
        self.frame_proj = [
            nn.Conv2d(rng, channels, channels, 1, f"{name}.frame{i}")
            for i in range(history + 1)
        ]
        self.mix = nn.Conv2d(rng, channels * (history + 1), channels, 3,
                             f"{name}.mix", padding=1)
        self.gate = nn.ChannelGate(rng, channels, f"{name}.gate")

    def parameters(self):
        out = {}
        for p in self.frame_proj:
            out.update(p.parameters())
        out.update(self.mix.parameters())
        out.update(self.gate.parameters())
        return out

    def fuse_aligned(self, grids: list[BevGrid]) -> BevGrid:
        if len(grids) != self.history + 1:
            raise ValueError(
                f"expected {self.history + 1} grids, got {len(grids)}")
        spec = grids[0].spec
        n = spec.cells_per_side
        projected = []
        for proj, g in zip(self.frame_proj, grids):
            x = ad.reshape(g.features, (1,) + g.features.shape)
            projected.append(ad.relu(proj(x)))
        stack = ad.concat(projected, axis=1)
        mixed = ad.relu(self.mix(stack))
        gated = self.gate(mixed)
        return BevGrid(ad.reshape(gated, (self.channels, n, n)), spec,
                       t=grids[-1].t)

    def __call__(self, seq: BevSequence) -> BevGrid:
        if seq.history != self.history:
            raise ValueError(
                f"sequence has h={seq.history}, fuser expects h={self.history}")
        return self.fuse_aligned(align_sequence(seq))
