"""Camera-to-BEV lifting: pinhole frustums, depth distributions, splatting.

Coordinate conventions (used everywhere downstream):
  * ego frame: +x forward, +y left, +z up, origin on the ground under the
    rear-axle center; units are meters.
  * camera frame: +z along the optical axis, +x right in the image, +y down.
    ``extrinsics`` maps camera coordinates to ego coordinates.
  * BEV grid: row index grows opposite +x, column index grows opposite +y,
    so the top row is farthest ahead and the leftmost column is farthest
    left.  A point (x, y) lands in cell
        row = floor(cells/2 - x/res), col = floor(cells/2 - y/res)
    and the center of cell (r, c) is
        x = (cells/2 - r - 0.5) * res, y = (cells/2 - c - 0.5) * res.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass(frozen=True)
class BevGridSpec:
    """Square metric grid around the ego vehicle."""

    extent: float = 100.0       # meters per side
    resolution: float = 0.5     # meters per cell

    def __post_init__(self):
        n = self.extent / self.resolution
        if abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"extent {self.extent} not an integer multiple of "
                f"resolution {self.resolution}")

    @property
    def cells_per_side(self) -> int:
        return int(round(self.extent / self.resolution))

    @property
    def ego_cell(self) -> int:
        return self.cells_per_side // 2

    def cell_of(self, x, y):
        """Cell indices containing metric points; may be out of range."""
        half = self.cells_per_side / 2.0
        r = np.floor(half - np.asarray(x) / self.resolution).astype(np.int64)
        c = np.floor(half - np.asarray(y) / self.resolution).astype(np.int64)
        return r, c

    def fractional_cell(self, x, y):
        """Continuous cell coordinates whose integer values are cell centers."""
        half = self.cells_per_side / 2.0
        r = half - np.asarray(x, dtype=np.float64) / self.resolution - 0.5
        c = half - np.asarray(y, dtype=np.float64) / self.resolution - 0.5
        return r, c

    def cell_center(self, r, c):
        half = self.cells_per_side / 2.0
        x = (half - np.asarray(r, dtype=np.float64) - 0.5) * self.resolution
        y = (half - np.asarray(c, dtype=np.float64) - 0.5) * self.resolution
        return x, y

    def center_grid(self):
        """(H, W) arrays of x and y cell-center coordinates."""
        n = self.cells_per_side
        rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return self.cell_center(rr, cc)


@dataclass
class BevGrid:
    """Feature grid (C, H, W) over a BevGridSpec at one timestamp."""

    features: Tensor
    spec: BevGridSpec
    t: float = 0.0

    def __post_init__(self):
        n = self.spec.cells_per_side
        if self.features.ndim != 3 or self.features.shape[1:] != (n, n):
            raise ad.ShapeMismatchError(
                f"BevGrid features {self.features.shape} do not match spec "
                f"({n}x{n})")

    @property
    def channels(self) -> int:
        return self.features.shape[0]


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a rigid camera-to-ego transform."""

    intrinsics: np.ndarray        # (3, 3)
    extrinsics: np.ndarray        # (4, 4), camera -> ego
    image_size: tuple[int, int]   # (height, width) pixels

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        k = self.intrinsics
        if k.shape != (3, 3) or self.extrinsics.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if abs(k[1, 0]) > 1e-12 or abs(k[2, 0]) > 1e-12 or abs(k[2, 1]) > 1e-12:
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.extrinsics[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("extrinsics rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("extrinsics rotation must have det +1")
        if np.abs(self.extrinsics[3] - np.array([0, 0, 0, 1.0])).max() > 1e-12:
            raise ValueError("extrinsics bottom row must be (0,0,0,1)")

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.ravel().tolist(),
            "extrinsics": self.extrinsics.ravel().tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            intrinsics=np.asarray(d["intrinsics"], dtype=np.float64).reshape(3, 3),
            extrinsics=np.asarray(d["extrinsics"], dtype=np.float64).reshape(4, 4),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        )


def save_rig(path, cameras: list[CameraModel]):
    with open(path, "w") as f:
        json.dump({"cameras": [c.to_dict() for c in cameras]}, f, indent=2)


def load_rig(path) -> list[CameraModel]:
    with open(path) as f:
        d = json.load(f)
    return [CameraModel.from_dict(c) for c in d["cameras"]]


# Camera axes expressed in ego axes for a camera looking along ego +x:
# image-right is ego -y, image-down is ego -z, optical axis is ego +x.
_CAM_TO_EGO_FACING_FWD = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def build_ring_rig(n_cameras: int = 6, image_size: tuple[int, int] = (64, 128),
                   hfov_deg: float = 64.0, height: float = 1.6) -> list[CameraModel]:
    """Evenly spaced horizontal ring of cameras sharing one pinhole model."""
    h, w = image_size
    fx = (w / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
    k = np.array([[fx, 0.0, w / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(n_cameras):
        yaw = 2.0 * np.pi * i / n_cameras
        cy, sy = np.cos(yaw), np.sin(yaw)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ext = np.eye(4)
        ext[:3, :3] = rz @ _CAM_TO_EGO_FACING_FWD
        ext[:3, 3] = (0.0, 0.0, height)
        cams.append(CameraModel(k, ext, image_size))
    return cams


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------

class ImageEncoder:
    """Three stride-2 convolutions (downsample 8) emitting features and
    depth logits from one head.

    Two fixed coordinate channels (normalized u, v) are appended to the RGB
    input so per-pixel depth can be inferred from image position; the
    public input contract stays 3-channel.  The last three feature
    channels are the 8x8 patch-mean RGB, a skip that hands appearance
    downstream while the convolutional channels specialize.
    """

    DOWNSAMPLE = 8
    RGB_SKIP = 3

    def __init__(self, rng, channels: int = 32, depth_bins: int = 16,
                 width1: int = 16, width2: int = 32, kernel2: int = 3,
                 name: str = "encoder"):
        if channels <= self.RGB_SKIP:
            raise ValueError(f"channels must exceed {self.RGB_SKIP}")
        self.channels = channels
        self.depth_bins = depth_bins
        self.conv1 = nn.Conv2d(rng, 5, width1, 3, f"{name}.conv1",
                               stride=2, padding=1)
        self.conv2 = nn.Conv2d(rng, width1, width2, (kernel2, 3),
                               f"{name}.conv2", stride=2,
                               padding=(kernel2 // 2, 1))
        self.conv3 = nn.Conv2d(rng, width2 + 2,
                               channels - self.RGB_SKIP + depth_bins, 3,
                               f"{name}.conv3", stride=2, padding=1)

    def parameters(self):
        return {**self.conv1.parameters(), **self.conv2.parameters(),
                **self.conv3.parameters()}

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """images (N, 3, H, W) in [0, 1] -> (features (N,C,He,We),
        depth logits (N,D,He,We))."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ad.ShapeMismatchError(
                f"encoder expects (N,3,H,W), got {images.shape}")
        if not np.isfinite(images.data).all():
            raise ValueError("encoder input contains non-finite pixels")
        n, _, h, w = images.shape
        ds = self.DOWNSAMPLE
        uu = np.linspace(-1.0, 1.0, w)
        vv = np.linspace(-1.0, 1.0, h)
        cu, cv = np.meshgrid(uu, vv)
        coords = np.broadcast_to(np.stack([cu, cv])[None], (n, 2, h, w))
        x = ad.concat([images, ad.constant(coords)], axis=1)
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        # re-inject image coordinates at the depth head's input: depth from
        # vertical position is a longer-range cue than its receptive field
        h2, w2 = x.shape[2], x.shape[3]
        cu2, cv2 = np.meshgrid(np.linspace(-1.0, 1.0, w2),
                               np.linspace(-1.0, 1.0, h2))
        coords2 = np.broadcast_to(np.stack([cu2, cv2])[None], (n, 2, h2, w2))
        x = ad.concat([x, ad.constant(coords2)], axis=1)
        x = self.conv3(x)
        conv_feats = ad.narrow(x, 1, 0, self.channels - self.RGB_SKIP)
        depth_logits = ad.narrow(x, 1, self.channels - self.RGB_SKIP,
                                 self.depth_bins)
        pooled = ad.mean_(
            ad.reshape(images, (n, 3, h // ds, ds, w // ds, ds)), axis=(3, 5))
        feats = ad.concat([conv_feats, pooled], axis=1)
        return feats, depth_logits


@dataclass
class DepthDistribution:
    """Per-pixel categorical distribution over metric depth bins."""

    probs: Tensor                 # (D, He, We) or (N, D, He, We)
    bin_centers: np.ndarray       # (D,), strictly increasing meters

    def __post_init__(self):
        self.bin_centers = np.asarray(self.bin_centers, dtype=np.float64)
        if np.any(np.diff(self.bin_centers) <= 0):
            raise ValueError("depth bin centers must be strictly increasing")
        d_axis = 0 if self.probs.ndim == 3 else 1
        if self.probs.shape[d_axis] != self.bin_centers.size:
            raise ad.ShapeMismatchError(
                f"probs {self.probs.shape} vs {self.bin_centers.size} bins")


def default_depth_bins(count: int = 16, start: float = 1.0,
                       step: float = 2.0) -> np.ndarray:
    return start + step * np.arange(count)


def normalize_depth(depth_logits: Tensor, bin_centers) -> DepthDistribution:
    """Softmax over the depth axis; per-pixel probabilities sum to one."""
    if not np.isfinite(depth_logits.data).all():
        raise ValueError("depth logits contain non-finite values")
    axis = 0 if depth_logits.ndim == 3 else 1
    return DepthDistribution(ad.softmax(depth_logits, axis=axis), bin_centers)


def lift_features(feats: Tensor, depth: DepthDistribution) -> Tensor:
    """Outer product over depth: out[c,d,h,w] = feats[c,h,w] * probs[d,h,w].

    Accepts (C,He,We) with (D,He,We) probs, or the batched (N,...) pair.
    """
    probs = depth.probs
    if feats.ndim == 3 and probs.ndim == 3:
        if feats.shape[1:] != probs.shape[1:]:
            raise ad.ShapeMismatchError(
                f"lift_features: {feats.shape} vs {probs.shape}")
        c, he, we = feats.shape
        d = probs.shape[0]
        return ad.mul(ad.reshape(feats, (c, 1, he, we)),
                      ad.reshape(probs, (1, d, he, we)))
    if feats.ndim == 4 and probs.ndim == 4:
        if feats.shape[0] != probs.shape[0] or feats.shape[2:] != probs.shape[2:]:
            raise ad.ShapeMismatchError(
                f"lift_features: {feats.shape} vs {probs.shape}")
        n, c, he, we = feats.shape
        d = probs.shape[1]
        return ad.mul(ad.reshape(feats, (n, c, 1, he, we)),
                      ad.reshape(probs, (n, 1, d, he, we)))
    raise ad.ShapeMismatchError(
        f"lift_features: {feats.shape} vs {probs.shape}")


def frustum_points(camera: CameraModel, bin_centers, feat_h: int, feat_w: int,
                   downsample: int = ImageEncoder.DOWNSAMPLE) -> np.ndarray:
    """Ego-frame 3-D points for every (depth bin, feature pixel): (D,He,We,3).

    Feature pixel (u, v) corresponds to image pixel center
    ((u + 0.5) * downsample, (v + 0.5) * downsample); each depth is measured
    along the optical axis.
    """
    bin_centers = np.asarray(bin_centers, dtype=np.float64)
    if np.any(bin_centers <= 0):
        raise ValueError("depth bin centers must be positive")
    k = camera.intrinsics
    if abs(np.linalg.det(k)) < 1e-12:
        raise ValueError("singular intrinsics")
    kinv = np.linalg.inv(k)
    us = (np.arange(feat_w) + 0.5) * downsample
    vs = (np.arange(feat_h) + 0.5) * downsample
    uu, vv = np.meshgrid(us, vs)
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ kinv.T   # (He,We,3)
    pts_cam = rays[None] * bin_centers[:, None, None, None]          # (D,He,We,3)
    r = camera.extrinsics[:3, :3]
    t = camera.extrinsics[:3, 3]
    return pts_cam @ r.T + t


DEFAULT_Z_BAND = (-2.0, 4.0)


def splat_to_bev(lifted: Tensor, points: np.ndarray, spec: BevGridSpec,
                 z_band: tuple[float, float] = DEFAULT_Z_BAND,
                 t: float = 0.0) -> tuple[BevGrid, int]:
    """Sum-accumulate lifted features (C,D,He,We) into grid cells.

    Each (d, h, w) entry contributes its C-vector to the cell containing
    points[d, h, w]; contributions outside the grid extent or the z band
    are dropped and counted.  Differentiable w.r.t. ``lifted``.
    """
    if lifted.ndim != 4 or points.shape != lifted.shape[1:] + (3,):
        raise ad.ShapeMismatchError(
            f"splat_to_bev: lifted {lifted.shape} vs points {points.shape}")
    c = lifted.shape[0]
    n = spec.cells_per_side
    m = points[..., 0].size
    xyz = points.reshape(m, 3)
    rows, cols = spec.cell_of(xyz[:, 0], xyz[:, 1])
    keep = ((rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
            & (xyz[:, 2] >= z_band[0]) & (xyz[:, 2] <= z_band[1]))
    dropped = int(m - keep.sum())
    flat = ad.reshape(lifted, (c, m))
    # route dropped points to a scratch column that is sliced away
    index = np.where(keep, rows * n + cols, n * n)
    out = ad.scatter_columns(flat, index, n * n + 1)
    grid = ad.reshape(ad.narrow(out, 1, 0, n * n), (c, n, n))
    return BevGrid(grid, spec, t=t), dropped


def splat_cameras(lifted_per_cam: list[Tensor], points_per_cam: list[np.ndarray],
                  spec: BevGridSpec, z_band=DEFAULT_Z_BAND,
                  t: float = 0.0) -> tuple[BevGrid, int]:
    """Deterministic ordered reduction of per-camera splats."""
    total = None
    dropped = 0
    for lifted, pts in zip(lifted_per_cam, points_per_cam):
        grid, d = splat_to_bev(lifted, pts, spec, z_band=z_band, t=t)
        dropped += d
        total = grid.features if total is None else ad.add(total, grid.features)
    return BevGrid(total, spec, t=t), dropped
