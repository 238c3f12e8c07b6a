"""Figure-style PPM exports: camera strip, heatmap, instances, vector
fields, costmap with the planned trajectory drawn in blue."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import BevGridSpec
from .planner import Trajectory
from .ppm import write_ppm

TRAJECTORY_COLOR = (0.10, 0.25, 1.00)

_PALETTE = np.array([
    (0.90, 0.10, 0.10), (0.10, 0.60, 0.90), (0.20, 0.80, 0.20),
    (0.95, 0.75, 0.10), (0.70, 0.25, 0.85), (0.95, 0.45, 0.10),
    (0.15, 0.80, 0.70), (0.85, 0.30, 0.55),
])


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Blue (cold) to red (hot); values clipped to [0, 1]. -> (H, W, 3)."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 * v - 0.25, 0, 1)
    g = 1.0 - np.abs(2.0 * v - 1.0)
    b = np.clip(1.25 - 1.5 * v, 0, 1)
    return np.stack([r, g * 0.85, b], axis=-1)


def instance_palette(ids: np.ndarray) -> np.ndarray:
    img = np.full(ids.shape + (3,), 0.12)
    for iid in np.unique(ids):
        if iid == 0:
            continue
        img[ids == iid] = _PALETTE[(iid - 1) % len(_PALETTE)]
    return img


def hsv_field(field: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Angle -> hue, magnitude -> value, for (2, H, W) vector fields."""
    dy, dx = field[0], field[1]
    mag = np.hypot(dy, dx)
    if max_mag is None:
        max_mag = max(float(mag.max()), 1e-6)
    val = np.clip(mag / max_mag, 0.0, 1.0)
    hue = (np.arctan2(dx, -dy) + np.pi) / (2.0 * np.pi)
    return _hsv_to_rgb(hue, np.ones_like(hue), val)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def costmap_image(cost: np.ndarray) -> np.ndarray:
    lo, hi = float(cost.min()), float(cost.max())
    norm = (cost - lo) / (hi - lo) if hi > lo else np.zeros_like(cost)
    # warm = low cost, matching the qualitative figures
    return heat_colormap(1.0 - norm)


def draw_trajectory(img: np.ndarray, traj: Trajectory, spec: BevGridSpec,
                    color=TRAJECTORY_COLOR) -> np.ndarray:
    out = img.copy()
    n = spec.cells_per_side
    for x, y in traj.positions:
        r, c = spec.cell_of(x, y)
        if 0 <= r < n and 0 <= c < n:
            out[max(r - 1, 0):r + 2, c] = color
            out[r, max(c - 1, 0):c + 2] = color
    return out


def camera_strip(images: np.ndarray) -> np.ndarray:
    """(6, 3, H, W) -> single (H, 6W, 3) strip in camera order."""
    return np.concatenate([im.transpose(1, 2, 0) for im in images], axis=1)


def export_viz(path, *, cameras=None, heatmap=None, instances=None,
               offsets=None, flow=None, costmap=None, trajectory=None,
               spec: BevGridSpec | None = None) -> list[str]:
    """Write the available panels; returns the filenames written."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, rgb_hw3):
        write_ppm(out / name, (rgb_hw3.transpose(2, 0, 1)))
        written.append(name)

    if cameras is not None:
        put("cameras.ppm", camera_strip(cameras))
    if heatmap is not None:
        put("center_heatmap.ppm", heat_colormap(heatmap))
    if instances is not None:
        put("instances.ppm", instance_palette(instances))
    if offsets is not None:
        put("offsets.ppm", hsv_field(offsets))
    if flow is not None:
        put("future_flow.ppm", hsv_field(flow))
    if costmap is not None:
        img = costmap_image(costmap)
        if trajectory is not None and spec is not None:
            img = draw_trajectory(img, trajectory, spec)
        put("costmap.ppm", img)
    return written
