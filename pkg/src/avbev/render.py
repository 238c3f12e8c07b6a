"""Flat-shaded multi-camera rasterizer for synthetic scenes.

Rays are cast per pixel with the same pinhole model used by the lifting
geometry, parameterized by camera-axis depth so the emitted depth map
matches the frustum convention exactly.  Ground classification goes
through a precomputed static world map; boxes and the traffic-light disc
are intersected analytically.  Besides RGB and true depth, the internal
entry point also returns per-pixel class ids and box entry/exit depths,
which exist purely for test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import Road, SyntheticScene

CLASS_SKY = 0
CLASS_GRASS = 1
CLASS_ROAD = 2
CLASS_PAINT = 3
CLASS_VEHICLE = 4
CLASS_PEDESTRIAN = 5
CLASS_AMBIG = 6
CLASS_LIGHT = 7

COLORS = {
    CLASS_SKY: (0.55, 0.70, 0.95),
    CLASS_GRASS: (0.33, 0.52, 0.28),
    CLASS_ROAD: (0.34, 0.34, 0.38),
    CLASS_PAINT: (0.95, 0.95, 0.92),
    CLASS_VEHICLE: (0.85, 0.13, 0.12),
    CLASS_PEDESTRIAN: (0.95, 0.80, 0.10),
    CLASS_AMBIG: (0.95, 0.47, 0.05),
}
LIGHT_COLORS = {"red": (1.0, 0.10, 0.10), "green": (0.10, 0.95, 0.20)}

AGENT_CLASS = {"vehicle": CLASS_VEHICLE, "pedestrian": CLASS_PEDESTRIAN,
               "ambiguous": CLASS_AMBIG}

_PAINT_HALF_WIDTH = 0.17


def classify_ground(roads: list[Road], gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Grass / road / paint class per ground point, from signed distances."""
    cls = np.full(gx.shape, CLASS_GRASS, dtype=np.uint8)
    paint = np.zeros(gx.shape, dtype=bool)
    for road in roads:
        sd = road.signed_distance(gx, gy)
        cls[np.abs(sd) <= road.half_width] = CLASS_ROAD
        for off in road.paint_offsets:
            paint |= np.abs(sd - off) <= _PAINT_HALF_WIDTH
    cls[paint] = CLASS_PAINT
    return cls


@dataclass
class RenderedFrame:
    images: np.ndarray         # (6, 3, H, W) in [0, 1]
    depth: np.ndarray          # (6, H, W) camera-axis depth, inf for sky
    class_ids: np.ndarray      # (6, H, W) uint8, oracle only
    box_entry: np.ndarray      # (6, H, W) depth where a box ray enters, inf
    box_exit: np.ndarray       # (6, H, W) depth where that ray leaves, inf
    box_index: np.ndarray      # (6, H, W) agent index or -1, oracle only


def _ray_box(origin, dirs, center, yaw, size):
    """Entry/exit depths of rays against an upright box; inf when missed."""
    l, w, h = size
    cy, sy = np.cos(yaw), np.sin(yaw)
    ox = cy * (origin[0] - center[0]) + sy * (origin[1] - center[1])
    oy = -sy * (origin[0] - center[0]) + cy * (origin[1] - center[1])
    oz = origin[2]
    dx = cy * dirs[..., 0] + sy * dirs[..., 1]
    dy = -sy * dirs[..., 0] + cy * dirs[..., 1]
    dz = dirs[..., 2]
    t_near = np.full(dx.shape, -np.inf)
    t_far = np.full(dx.shape, np.inf)
    for o, d, lo, hi in ((ox, dx, -l / 2, l / 2), (oy, dy, -w / 2, w / 2),
                         (oz, dz, 0.0, h)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        swap = t1 > t2
        t1, t2 = np.where(swap, t2, t1), np.where(swap, t1, t2)
        parallel = np.abs(d) < 1e-12
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        t_near = np.maximum(t_near, t1)
        t_far = np.minimum(t_far, t2)
    hit = (t_near <= t_far) & (t_far > 0.05)
    entry = np.where(hit, np.maximum(t_near, 0.05), np.inf)
    exit_ = np.where(hit, t_far, np.inf)
    return entry, exit_


def render_frame(scene: SyntheticScene, step: int) -> RenderedFrame:
    if not 0 <= step < scene.duration:
        raise ValueError(f"step {step} outside scene duration {scene.duration}")
    pose = scene.ego_poses[step]
    cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
    ego_rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ego_pos = np.array([pose.x, pose.y, 0.0])
    n_cams = len(scene.rig)
    h, w = scene.rig[0].image_size
    images = np.zeros((n_cams, 3, h, w))
    depth = np.full((n_cams, h, w), np.inf)
    class_ids = np.zeros((n_cams, h, w), dtype=np.uint8)
    box_entry = np.full((n_cams, h, w), np.inf)
    box_exit = np.full((n_cams, h, w), np.inf)
    box_index = np.full((n_cams, h, w), -1, dtype=np.int32)
    light_state = scene.light_state(step)
    for ci, cam in enumerate(scene.rig):
        kinv = np.linalg.inv(cam.intrinsics)
        us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        rays_cam = np.stack([us, vs, np.ones_like(us)], axis=-1) @ kinv.T
        r_ce = cam.extrinsics[:3, :3]
        dirs = rays_cam @ (ego_rot @ r_ce).T           # world dirs, unit cam-z
        origin = ego_pos + ego_rot @ cam.extrinsics[:3, 3]
        cls = np.full((h, w), CLASS_SKY, dtype=np.uint8)
        dep = np.full((h, w), np.inf)
        # ground plane z = 0
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_g = -origin[2] / dz
        ground = (dz < -1e-9) & (t_g > 0.05)
        gx = origin[0] + t_g[ground] * dirs[..., 0][ground]
        gy = origin[1] + t_g[ground] * dirs[..., 1][ground]
        cls[ground] = classify_ground(scene.roads, gx, gy)
        dep[ground] = t_g[ground]
        # agents
        for ai, agent in enumerate(scene.agents):
            entry, exit_ = _ray_box(origin, dirs, agent.positions[step],
                                    agent.yaws[step], agent.size)
            closer = entry < dep
            cls[closer] = AGENT_CLASS[agent.kind]
            dep[closer] = entry[closer]
            box_entry[ci][closer] = entry[closer]
            box_exit[ci][closer] = exit_[closer]
            box_index[ci][closer] = ai
        # traffic light disc
        if scene.light is not None and light_state in LIGHT_COLORS:
            nvec = scene.light.normal
            denom = dirs @ nvec
            with np.errstate(divide="ignore", invalid="ignore"):
                t_l = ((scene.light.position - origin) @ nvec) / denom
            hit_pt = origin[None, None, :] + t_l[..., None] * dirs
            dist = np.linalg.norm(hit_pt - scene.light.position, axis=-1)
            lit = (np.abs(denom) > 1e-9) & (t_l > 0.05) & \
                (dist <= scene.light.radius) & (t_l < dep)
            cls[lit] = CLASS_LIGHT
            dep[lit] = t_l[lit]
        img = np.empty((h, w, 3))
        for cid, color in COLORS.items():
            img[cls == cid] = color
        if (cls == CLASS_LIGHT).any():
            img[cls == CLASS_LIGHT] = LIGHT_COLORS[light_state]
        images[ci] = img.transpose(2, 0, 1)
        depth[ci] = dep
        class_ids[ci] = cls
        # entries behind a nearer non-box surface are not visible
        occluded = box_entry[ci] > dep + 1e-9
        box_entry[ci][occluded] = np.inf
        box_exit[ci][occluded] = np.inf
        box_index[ci][occluded] = -1
    return RenderedFrame(images, depth, class_ids, box_entry, box_exit,
                         box_index)


def render_cameras(scene: SyntheticScene, step: int):
    """Public contract: (images (6,3,H,W) in [0,1], true depth (6,H,W))."""
    f = render_frame(scene, step)
    return f.images, f.depth
