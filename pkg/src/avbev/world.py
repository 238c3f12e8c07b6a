"""Deterministic toy driving world with exact ground truth.

A scenario seed fully determines roads, agents, the traffic light, ego
motion and captions.  World coordinates put the ego route start at the
origin heading +x, with the ego lane centered on y=0 (road centerline at
y=+1.75, single 3.5 m lane each way).  Agents are box obstacles parked or
crawling on the shoulders; the "corridor" layout additionally drops a
blocking box into the ego lane for planner scenarios.

Everything downstream (masks, occupancy, captions, expert trajectories)
is derived from this module, so tests can rasterize and project against
closed-form geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BevGridSpec, CameraModel, build_ring_rig
from .planner import (PLAN_DT, PLAN_STEPS, LaneRef, Trajectory,
                      collision_rate, kinematics_feasible)
from .temporal import FRAME_DT, EgoPose

LANE_WIDTH = 3.5
ROAD_CENTER_OFFSET = LANE_WIDTH / 2.0     # ego lane center is y=0
PAINT_HALF_WIDTH = 0.17
VEHICLE_SIZE = (4.2, 2.0, 1.5)            # length, width, height
PEDESTRIAN_SIZE = (0.6, 0.6, 1.7)
AMBIG_SIZE = (4.2, 2.0, 1.5)
STOP_LINE_SETBACK = 4.5                   # stop line before junction center
MAX_AGENT_SPEED = 0.9                     # m/s, keeps motion continuous
GAUSS_SIGMA = 1.5                         # cells, center heatmap target

LAYOUTS = ("straight", "curve", "intersection", "corridor")
BEHAVIORS = ("keep-lane", "turn", "stop-at-red")
LIGHTS = ("none", "red", "green")

MANEUVER_NAMES = {
    "keep-lane": "going straight",
    "turn-left": "turning left",
    "turn-right": "turning right",
    "stop": "stopping",
}


class InfeasibleScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    duration: int = 12                    # steps at 2 Hz
    layout: str = "straight"
    agent_count: int = 4
    light_schedule: str = "none"          # none | red | green
    ego_behavior: str = "keep-lane"
    ambiguous_boxes: bool = False
    ego_speed: float | None = None        # m/s; None -> seeded
    spawn_band: tuple | None = None       # route-s interval for agents

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "duration": self.duration,
            "layout": self.layout, "agent_count": self.agent_count,
            "light_schedule": self.light_schedule,
            "ego_behavior": self.ego_behavior,
            "ambiguous_boxes": self.ambiguous_boxes,
            "ego_speed": self.ego_speed,
            "spawn_band": list(self.spawn_band) if self.spawn_band else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        band = d.get("spawn_band")
        return cls(seed=d["seed"], duration=d.get("duration", 12),
                   layout=d.get("layout", "straight"),
                   agent_count=d.get("agent_count", 4),
                   light_schedule=d.get("light_schedule", "none"),
                   ego_behavior=d.get("ego_behavior", "keep-lane"),
                   ambiguous_boxes=d.get("ambiguous_boxes", False),
                   ego_speed=d.get("ego_speed"),
                   spawn_band=tuple(band) if band else None)

    def validate(self):
        if self.layout not in LAYOUTS:
            raise InfeasibleScenarioError(f"unknown layout {self.layout!r}")
        if self.ego_behavior not in BEHAVIORS:
            raise InfeasibleScenarioError(
                f"unknown behavior {self.ego_behavior!r}")
        if self.light_schedule not in LIGHTS:
            raise InfeasibleScenarioError(
                f"unknown light schedule {self.light_schedule!r}")
        if not 0 <= self.agent_count <= 8:
            raise InfeasibleScenarioError(
                f"agent count {self.agent_count} outside [0, 8]")
        if self.ego_behavior == "turn" and self.layout != "intersection":
            raise InfeasibleScenarioError("turning requires an intersection")
        if self.duration < PLAN_STEPS + 3:
            raise InfeasibleScenarioError(
                f"duration {self.duration} too short for the 3 s horizon")


@dataclass
class Road:
    """A straight-or-curved corridor: centerline polyline plus paint lines."""

    centerline: np.ndarray                # (N, 2) world meters
    half_width: float = LANE_WIDTH
    paint_offsets: tuple = (-LANE_WIDTH, 0.0, LANE_WIDTH)

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        seg = np.diff(self.centerline, axis=0)
        self._len = np.linalg.norm(seg, axis=1)
        self._dir = seg / self._len[:, None]

    def distance(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the centerline polyline."""
        qx = np.asarray(px, dtype=np.float64).ravel()
        qy = np.asarray(py, dtype=np.float64).ravel()
        ax, ay = self.centerline[:-1, 0], self.centerline[:-1, 1]
        dx, dy = self._dir[:, 0], self._dir[:, 1]
        out = np.empty(qx.size)
        chunk = max(1, 4_000_000 // max(len(ax), 1))
        for i0 in range(0, qx.size, chunk):
            relx = qx[i0:i0 + chunk, None] - ax[None, :]
            rely = qy[i0:i0 + chunk, None] - ay[None, :]
            t = np.clip(relx * dx[None, :] + rely * dy[None, :],
                        0.0, self._len[None, :])
            ex = relx - t * dx[None, :]
            ey = rely - t * dy[None, :]
            out[i0:i0 + chunk] = np.sqrt((ex * ex + ey * ey).min(axis=1))
        return out.reshape(np.asarray(px).shape)

    def signed_distance(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Distance with positive sign left of the travel direction."""
        qx = np.asarray(px, dtype=np.float64).ravel()
        qy = np.asarray(py, dtype=np.float64).ravel()
        ax, ay = self.centerline[:-1, 0], self.centerline[:-1, 1]
        dx, dy = self._dir[:, 0], self._dir[:, 1]
        out = np.empty(qx.size)
        chunk = max(1, 4_000_000 // max(len(ax), 1))
        for i0 in range(0, qx.size, chunk):
            relx = qx[i0:i0 + chunk, None] - ax[None, :]
            rely = qy[i0:i0 + chunk, None] - ay[None, :]
            t = np.clip(relx * dx[None, :] + rely * dy[None, :],
                        0.0, self._len[None, :])
            ex = relx - t * dx[None, :]
            ey = rely - t * dy[None, :]
            d2 = ex * ex + ey * ey
            best = d2.argmin(axis=1)
            rows = np.arange(best.size)
            cross = (dx[best] * ey[rows, best] - dy[best] * ex[rows, best])
            out[i0:i0 + chunk] = np.sign(cross) * np.sqrt(d2[rows, best])
        return out.reshape(np.asarray(px).shape)

    def offset_polyline(self, offset: float) -> np.ndarray:
        normals = np.empty_like(self.centerline)
        seg_n = np.stack([-self._dir[:, 1], self._dir[:, 0]], axis=1)
        normals[:-1] = seg_n
        normals[-1] = seg_n[-1]
        return self.centerline + offset * normals


@dataclass
class Agent:
    """A box obstacle with a constant-velocity track."""

    kind: str                              # vehicle | pedestrian | ambiguous
    size: tuple                            # (length, width, height)
    positions: np.ndarray                  # (T, 2) world meters, box center
    yaws: np.ndarray                       # (T,)
    speed: float

    def corners(self, step: int) -> np.ndarray:
        l, w, _ = self.size
        cx, cy = self.positions[step]
        yaw = self.yaws[step]
        local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
        rot = np.array([[np.cos(yaw), -np.sin(yaw)], [np.sin(yaw), np.cos(yaw)]])
        return local @ rot.T + (cx, cy)


@dataclass
class TrafficLight:
    position: np.ndarray                   # (3,) world, disc center
    normal: np.ndarray                     # (3,) facing direction
    radius: float
    states: list[str]                      # per step


@dataclass
class SyntheticScene:
    spec: ScenarioSpec
    rig: list[CameraModel]
    roads: list[Road]
    route: np.ndarray                      # (N, 2) ego route polyline (world)
    ego_poses: list[EgoPose]
    ego_speeds: np.ndarray                 # (T,)
    route_s: np.ndarray                    # (T,) arc length along the route
    agents: list[Agent]
    light: TrafficLight | None
    stop_line_s: float | None              # arc length along route
    ambiguous_noun: str = "vehicles"       # vehicles | barriers
    maneuver: str = "going straight"

    @property
    def duration(self) -> int:
        return len(self.ego_poses)

    def light_state(self, step: int) -> str:
        if self.light is None:
            return "none"
        return self.light.states[step]

    def world_to_ego(self, step: int):
        """(rotation 2x2, translation) mapping world points to ego frame."""
        pose = self.ego_poses[step]
        cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
        rot = np.array([[cy, sy], [-sy, cy]])
        return rot, np.array([pose.x, pose.y])

    def route_lane(self) -> LaneRef:
        return LaneRef(self.route, width=LANE_WIDTH)

    def lane_ref_at(self, step: int, reach: float = 45.0) -> LaneRef:
        """Ego-frame lane reference around the current route position."""
        rot, trans = self.world_to_ego(step)
        pts = (self.route - trans) @ rot.T
        lane = LaneRef(pts, width=LANE_WIDTH)
        s0, _ = lane.project((0.0, 0.0))
        lo = max(0.0, s0 - 10.0)
        ss = np.arange(lo, s0 + reach, 1.0)
        return LaneRef(np.array([lane.pose_at(s)[0] for s in ss]),
                       width=LANE_WIDTH)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _polyline_line(x0, y0, heading, length, spacing=1.0):
    n = max(int(np.ceil(length / spacing)) + 1, 2)
    s = np.linspace(0.0, length, n)
    return np.stack([x0 + s * np.cos(heading), y0 + s * np.sin(heading)], axis=1)


def _polyline_arc(cx, cy, radius, a0, a1, spacing=1.0):
    arc_len = abs(a1 - a0) * radius
    n = max(int(np.ceil(arc_len / spacing)) + 1, 2)
    ang = np.linspace(a0, a1, n)
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


def _dedup(poly: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(poly)):
        if np.linalg.norm(poly[i] - poly[keep[-1]]) > 1e-6:
            keep.append(i)
    return poly[keep]


def obb_overlap(c1, yaw1, size1, c2, yaw2, size2) -> bool:
    """Separating-axis test for two ground-plane rectangles."""
    def corners(c, yaw, size):
        l, w = size[0], size[1]
        local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
        rot = np.array([[np.cos(yaw), -np.sin(yaw)], [np.sin(yaw), np.cos(yaw)]])
        return local @ rot.T + np.asarray(c)

    p1, p2 = corners(c1, yaw1, size1), corners(c2, yaw2, size2)
    for poly in (p1, p2):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            a1, a2 = p1 @ axis, p2 @ axis
            if a1.max() < a2.min() or a2.max() < a1.min():
                return False
    return True


def points_in_box(px, py, center, yaw, size) -> np.ndarray:
    l, w = size[0], size[1]
    dx, dy = px - center[0], py - center[1]
    lon = np.cos(yaw) * dx + np.sin(yaw) * dy
    lat = -np.sin(yaw) * dx + np.cos(yaw) * dy
    return (np.abs(lon) <= l / 2.0) & (np.abs(lat) <= w / 2.0)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _build_layout(spec: ScenarioSpec, rng: np.random.Generator):
    """Roads, ego route, stop line, maneuver tag, in-lane obstacle position."""
    far = 130.0
    if spec.layout in ("straight", "corridor"):
        road = Road(_polyline_line(-40.0, ROAD_CENTER_OFFSET, 0.0,
                                   far + 40.0, spacing=far + 40.0))
        route = _polyline_line(0.0, 0.0, 0.0, far, spacing=0.5)
        if spec.layout == "corridor":
            s_obs = float(rng.uniform(9.0, 14.0))
            return [road], route, s_obs - 4.5, "stop", s_obs
        return [road], route, None, "keep-lane", None
    if spec.layout == "curve":
        radius = float(rng.uniform(45.0, 80.0))
        left = bool(rng.integers(0, 2))
        # ego lane radius differs from road centerline radius by the offset
        if left:
            cx, cy = 0.0, radius
            lane_r = radius
            road_r = radius - ROAD_CENTER_OFFSET
            a0 = -np.pi / 2.0
            a1 = a0 + far / lane_r
            route = _polyline_arc(cx, cy, lane_r, a0, a1, spacing=0.5)
            road = Road(_polyline_arc(cx, cy, road_r, a0 - 10.0 / road_r,
                                      a1 + 10.0 / road_r, spacing=3.0))
        else:
            cx, cy = 0.0, -radius
            lane_r = radius
            road_r = radius + ROAD_CENTER_OFFSET
            a0 = np.pi / 2.0
            a1 = a0 - far / lane_r
            route = _polyline_arc(cx, cy, lane_r, a0, a1, spacing=0.5)
            road = Road(_polyline_arc(cx, cy, road_r, a0 + 10.0 / road_r,
                                      a1 - 10.0 / road_r, spacing=3.0))
        return [road], route, None, "keep-lane", None
    # intersection
    x_junction = float(rng.uniform(14.0, 22.0))
    if spec.ego_behavior == "stop-at-red":
        x_junction = float(rng.uniform(7.0, 10.0))
    road_a = Road(_polyline_line(-40.0, ROAD_CENTER_OFFSET, 0.0,
                               far + 40.0, spacing=far + 40.0))
    road_b = Road(_polyline_line(x_junction + ROAD_CENTER_OFFSET, -60.0,
                                 np.pi / 2.0, 120.0, spacing=120.0))
    stop_s = x_junction - STOP_LINE_SETBACK
    if spec.ego_behavior == "turn":
        turn_left = bool(rng.integers(0, 2))
        r_turn = 8.0
        pre = _polyline_line(0.0, 0.0, 0.0, x_junction - r_turn, spacing=0.5)
        if turn_left:
            arc = _polyline_arc(x_junction - r_turn, r_turn, r_turn,
                                -np.pi / 2.0, 0.0, spacing=0.5)
            post = _polyline_line(x_junction, r_turn, np.pi / 2.0, 60.0,
                                  spacing=0.5)
            maneuver = "turn-left"
        else:
            arc = _polyline_arc(x_junction - r_turn, -r_turn, r_turn,
                                np.pi / 2.0, 0.0, spacing=0.5)
            post = _polyline_line(x_junction, -r_turn, -np.pi / 2.0, 60.0,
                                  spacing=0.5)
            maneuver = "turn-right"
        route = _dedup(np.concatenate([pre, arc, post]))
        return [road_a, road_b], route, stop_s, maneuver, None
    route = _polyline_line(0.0, 0.0, 0.0, far, spacing=0.5)
    return [road_a, road_b], route, stop_s, "keep-lane", None


def _speed_profile(spec: ScenarioSpec, rng, stop_s, duration):
    """Per-step (s, v) along the route."""
    if spec.ego_speed is not None:
        v0 = float(spec.ego_speed)
    elif spec.ego_behavior == "stop-at-red":
        v0 = float(rng.uniform(0.7, 1.0))
    elif spec.layout == "corridor":
        v0 = float(rng.uniform(1.8, 2.6))
    elif spec.ego_behavior == "turn":
        v0 = float(rng.uniform(2.0, 3.2))
    else:
        v0 = float(rng.uniform(3.0, 7.0))
    stopping = ((spec.ego_behavior == "stop-at-red"
                 and spec.light_schedule == "red")
                or spec.layout == "corridor")
    s, v = 0.0, v0
    ss, vs = [0.0], [v0]
    decel = 0.35 if stopping else 0.0
    for _ in range(duration - 1):
        if stopping and stop_s is not None:
            # brake so that v^2 / (2 a) meets the stop line
            dist = max(stop_s - s, 0.0)
            if dist < 1e-6 or v <= 0.0:
                v = 0.0
            else:
                a_need = v * v / (2.0 * dist)
                if a_need >= decel:
                    v = max(v - a_need * FRAME_DT, 0.0)
        s = s + v * FRAME_DT
        if stopping and stop_s is not None:
            s = min(s, stop_s)
        ss.append(s)
        vs.append(v)
    return np.array(ss), np.array(vs)


def _route_pose(route_lane: LaneRef, s: float, t: float) -> EgoPose:
    pt, tan = route_lane.pose_at(s)
    return EgoPose(float(pt[0]), float(pt[1]),
                   float(np.arctan2(tan[1], tan[0])), t=t)


def _spawn_agents(spec: ScenarioSpec, rng, route_lane: LaneRef,
                  duration: int, obstacle_s: float | None,
                  ego_s_end: float = 0.0) -> list[Agent]:
    agents: list[Agent] = []
    if obstacle_s is not None:
        # one blocking box in the ego lane, the rest parked on shoulders
        pt, tan = route_lane.pose_at(obstacle_s)
        yaw = float(np.arctan2(tan[1], tan[0]))
        pos = np.repeat(pt[None, :], duration, axis=0)
        agents.append(Agent("vehicle", VEHICLE_SIZE, pos,
                            np.full(duration, yaw), 0.0))
    want = spec.agent_count
    kind_default = "ambiguous" if spec.ambiguous_boxes else None
    placed_s: list[float] = [obstacle_s] if obstacle_s is not None else []
    attempts = 0
    while len(agents) < want + (1 if obstacle_s is not None else 0):
        attempts += 1
        if attempts > 400:
            raise InfeasibleScenarioError(
                f"could not place {want} agents on layout {spec.layout}")
        if kind_default:
            kind = "ambiguous"
        else:
            kind = "pedestrian" if rng.random() < 0.15 else "vehicle"
        size = {"vehicle": VEHICLE_SIZE, "pedestrian": PEDESTRIAN_SIZE,
                "ambiguous": AMBIG_SIZE}[kind]
        if spec.spawn_band is not None:
            s_pos = float(rng.uniform(*spec.spawn_band))
        else:
            s_pos = float(rng.uniform(-10.0, ego_s_end + 11.0))
        if obstacle_s is None and -2.0 < s_pos - ego_s_end < 2.0:
            continue
        spacing = 4.5 if attempts > 150 else 5.5
        if any(abs(s_pos - p) < spacing for p in placed_s):
            continue
        side = -1.0 if rng.random() < 0.65 else 1.0
        lateral = side * float(rng.uniform(3.1, 4.4))
        if kind == "pedestrian":
            lateral = side * float(rng.uniform(2.6, 3.4))
        pt, tan = route_lane.pose_at(s_pos)
        normal = np.array([-tan[1], tan[0]])
        center = pt + lateral * normal
        yaw = float(np.arctan2(tan[1], tan[0]))
        speed = 0.0
        if kind == "pedestrian" or rng.random() < 0.35:
            speed = float(rng.uniform(0.3, MAX_AGENT_SPEED))
        if spec.ego_behavior == "turn":
            speed = 0.0        # movers can drift into the curved ego path
        direction = tan if rng.random() < 0.5 else -tan
        ts = FRAME_DT * np.arange(duration)
        positions = center[None, :] + speed * ts[:, None] * direction[None, :]
        clearance = 2.45 if kind == "pedestrian" else 2.9
        if min(abs(route_lane.project(p)[1]) for p in positions) < clearance:
            continue
        ok = True
        for other in agents:
            for st in (0, duration - 1):
                if obb_overlap(positions[st], yaw, size,
                               other.positions[st], other.yaws[st], other.size):
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        agents.append(Agent(kind, size, positions, np.full(duration, yaw),
                            speed))
        placed_s.append(s_pos)
    return agents


def generate_scene(spec: ScenarioSpec,
                   image_size: tuple[int, int] = (64, 128)) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    roads, route, stop_s, maneuver, obstacle_s = _build_layout(spec, rng)
    route_lane = LaneRef(route, width=LANE_WIDTH)
    ss, vs = _speed_profile(spec, rng, stop_s, spec.duration)
    poses = [_route_pose(route_lane, s, t=FRAME_DT * i)
             for i, s in enumerate(ss)]
    agents = _spawn_agents(spec, rng, route_lane, spec.duration, obstacle_s,
                           ego_s_end=float(ss[-1]))
    light = None
    if stop_s is not None and spec.light_schedule != "none":
        pt, tan = route_lane.pose_at(stop_s)
        normal = np.array([-tan[1], tan[0]])
        pos2d = pt - 3.0 * normal           # pole on the right shoulder
        light = TrafficLight(
            position=np.array([pos2d[0], pos2d[1], 3.0]),
            normal=np.array([-tan[0], -tan[1], 0.0]),
            radius=0.45,
            states=[spec.light_schedule] * spec.duration,
        )
    if spec.ego_behavior == "stop-at-red" and spec.light_schedule == "red":
        maneuver = "stop"
    noun = "vehicles"
    if spec.ambiguous_boxes:
        noun = "vehicles" if rng.random() < 0.5 else "barriers"
    rig = build_ring_rig(6, image_size=tuple(image_size))
    scene = SyntheticScene(spec=spec, rig=rig, roads=roads, route=route,
                           ego_poses=poses, ego_speeds=vs, route_s=ss,
                           agents=agents, light=light, stop_line_s=stop_s,
                           ambiguous_noun=noun,
                           maneuver=MANEUVER_NAMES[maneuver])
    _check_expert_feasible(scene)
    return scene


def _check_expert_feasible(scene: SyntheticScene):
    grid = BevGridSpec(extent=50.0, resolution=0.5)
    last = scene.duration - PLAN_STEPS - 1
    for step in range(0, last + 1, max(last, 1)):
        traj = expert_trajectory(scene, step)
        if not kinematics_feasible(traj.states):
            raise InfeasibleScenarioError(
                f"expert trajectory infeasible at step {step}")
        occ = future_occupancy(scene, step, grid)
        cr = collision_rate(traj, occ, grid)
        if cr["3s"] > 0.0:
            raise InfeasibleScenarioError(
                f"expert trajectory collides at step {step}")


# ---------------------------------------------------------------------------
# ground truth rasterization
# ---------------------------------------------------------------------------

SEMANTIC_INDEX = {"drivable": 0, "lane": 1, "vehicle": 2, "pedestrian": 3}


def _agents_as_vehicles(scene: SyntheticScene) -> list[Agent]:
    out = []
    for a in scene.agents:
        if a.kind == "vehicle":
            out.append(a)
        elif a.kind == "ambiguous" and scene.ambiguous_noun == "vehicles":
            out.append(a)
    return out


def _ego_frame_centers(scene, step, spec: BevGridSpec):
    xc, yc = spec.center_grid()
    rot, trans = scene.world_to_ego(step)
    inv = rot.T
    wx = inv[0, 0] * xc + inv[0, 1] * yc + trans[0]
    wy = inv[1, 0] * xc + inv[1, 1] * yc + trans[1]
    return wx, wy


def semantic_masks(scene: SyntheticScene, step: int,
                   spec: BevGridSpec) -> np.ndarray:
    """(4, H, W) boolean masks in the ego frame at ``step``."""
    wx, wy = _ego_frame_centers(scene, step, spec)
    n = spec.cells_per_side
    masks = np.zeros((4, n, n), dtype=bool)
    for road in scene.roads:
        sd = road.signed_distance(wx, wy)
        masks[0] |= np.abs(sd) <= road.half_width
        for off in road.paint_offsets:
            masks[1] |= np.abs(sd - off) <= PAINT_HALF_WIDTH
    for agent in _agents_as_vehicles(scene):
        masks[2] |= points_in_box(wx, wy, agent.positions[step],
                                  agent.yaws[step], agent.size)
    for agent in scene.agents:
        if agent.kind == "pedestrian":
            masks[3] |= points_in_box(wx, wy, agent.positions[step],
                                      agent.yaws[step], agent.size)
    return masks


def instance_map(scene: SyntheticScene, step: int,
                 spec: BevGridSpec) -> tuple[np.ndarray, list[Agent]]:
    """Vehicle instance ids plus the agents they came from, in id order."""
    wx, wy = _ego_frame_centers(scene, step, spec)
    n = spec.cells_per_side
    ids = np.zeros((n, n), dtype=np.int32)
    owners = []
    next_id = 1
    for agent in _agents_as_vehicles(scene):
        mask = points_in_box(wx, wy, agent.positions[step], agent.yaws[step],
                             agent.size)
        if mask.any():
            ids[mask] = next_id
            owners.append(agent)
            next_id += 1
    return ids, owners


def future_occupancy(scene: SyntheticScene, step: int,
                     spec: BevGridSpec) -> np.ndarray:
    """(6, H, W) obstacle occupancy at steps t+1..t+6 in the frame of t."""
    wx, wy = _ego_frame_centers(scene, step, spec)
    n = spec.cells_per_side
    occ = np.zeros((PLAN_STEPS, n, n), dtype=bool)
    for k in range(1, PLAN_STEPS + 1):
        fut = step + k
        for agent in scene.agents:
            idx = min(fut, scene.duration - 1)
            occ[k - 1] |= points_in_box(wx, wy, agent.positions[idx],
                                        agent.yaws[idx], agent.size)
    return occ


def expert_trajectory(scene: SyntheticScene, step: int) -> Trajectory:
    if step + PLAN_STEPS >= scene.duration:
        raise ValueError(f"step {step} has no 3 s future in this scene")
    rot, trans = scene.world_to_ego(step)
    base_yaw = scene.ego_poses[step].yaw
    states = np.zeros((PLAN_STEPS + 1, 4))
    for k in range(PLAN_STEPS + 1):
        pose = scene.ego_poses[step + k]
        p = rot @ (np.array([pose.x, pose.y]) - trans)
        yaw = np.arctan2(np.sin(pose.yaw - base_yaw),
                         np.cos(pose.yaw - base_yaw))
        states[k] = (p[0], p[1], yaw, scene.ego_speeds[step + k])
    return Trajectory(states, lateral_offset=0.0, profile="expert")


@dataclass
class InstanceTargets:
    heatmap: np.ndarray        # (H, W) in [0, 1]
    offsets: np.ndarray        # (2, H, W) cells toward the owning center
    flow: np.ndarray           # (2, H, W) cells per step
    mask: np.ndarray           # (H, W) bool, supervision support
    centers: np.ndarray        # (K, 2) fractional cell coordinates
    flows: np.ndarray          # (K, 2) per-instance cell displacement per step


def instance_targets(scene: SyntheticScene, step: int, spec: BevGridSpec,
                     ids: np.ndarray, owners: list[Agent]) -> InstanceTargets:
    n = spec.cells_per_side
    heat = np.zeros((n, n))
    offsets = np.zeros((2, n, n))
    flow = np.zeros((2, n, n))
    mask = ids > 0
    rot, trans = scene.world_to_ego(step)
    centers = []
    flows = []
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for iid, agent in enumerate(owners, start=1):
        ego_c = rot @ (agent.positions[step] - trans)
        cr, ccol = spec.fractional_cell(ego_c[0], ego_c[1])
        centers.append((cr, ccol))
        nxt = min(step + 1, scene.duration - 1)
        d_world = agent.positions[nxt] - agent.positions[step]
        d_ego = rot @ d_world
        drow = -d_ego[0] / spec.resolution
        dcol = -d_ego[1] / spec.resolution
        flows.append((drow, dcol))
        sel = ids == iid
        offsets[0][sel] = cr - rr[sel]
        offsets[1][sel] = ccol - cc[sel]
        flow[0][sel] = drow
        flow[1][sel] = dcol
        d2 = (rr - cr) ** 2 + (cc - ccol) ** 2
        heat = np.maximum(heat, np.exp(-d2 / (2.0 * GAUSS_SIGMA ** 2)))
    return InstanceTargets(heat, offsets, flow, mask,
                           np.array(centers).reshape(-1, 2),
                           np.array(flows).reshape(-1, 2))


def caption_for_camera(scene: SyntheticScene, step: int, cam_index: int,
                       max_range: float = 30.0) -> str:
    """Template: 'ego {maneuver}; {k} {noun} ahead; light is {state}'."""
    cam = scene.rig[cam_index]
    fov = 2.0 * np.arctan(cam.image_size[1] / (2.0 * cam.intrinsics[0, 0]))
    axis = cam.extrinsics[:3, 2]
    cam_yaw = np.arctan2(axis[1], axis[0])
    rot, trans = scene.world_to_ego(step)
    count = 0
    for agent in scene.agents:
        if agent.kind == "pedestrian":
            continue
        p = rot @ (agent.positions[step] - trans)
        rng_m = np.hypot(p[0], p[1])
        bearing = np.arctan2(p[1], p[0]) - cam_yaw
        bearing = np.arctan2(np.sin(bearing), np.cos(bearing))
        if rng_m <= max_range and abs(bearing) <= fov / 2.0:
            count += 1
    noun = scene.ambiguous_noun if scene.spec.ambiguous_boxes else "vehicles"
    return (f"ego {scene.maneuver}; {count} {noun} ahead; "
            f"light is {scene.light_state(step)}")


def captions_for_frame(scene: SyntheticScene, step: int) -> list[str]:
    return [caption_for_camera(scene, step, k) for k in range(len(scene.rig))]


@dataclass
class GroundTruthFrame:
    step: int
    ego_pose: EgoPose
    semantic: np.ndarray              # (4, H, W) bool
    instances: np.ndarray             # (H, W) int32
    occupancy: np.ndarray             # (6, H, W) bool
    expert: Trajectory
    captions: list[str]               # per camera, cam0 is front
    light_state: str
    targets: InstanceTargets

    @property
    def caption(self) -> str:
        return self.captions[0]


def gt_frame(scene: SyntheticScene, step: int, spec: BevGridSpec) -> GroundTruthFrame:
    if step + PLAN_STEPS >= scene.duration:
        raise ValueError(f"step {step} has no 3 s future in this scene")
    sem = semantic_masks(scene, step, spec)
    ids, owners = instance_map(scene, step, spec)
    return GroundTruthFrame(
        step=step,
        ego_pose=scene.ego_poses[step],
        semantic=sem,
        instances=ids,
        occupancy=future_occupancy(scene, step, spec),
        expert=expert_trajectory(scene, step),
        captions=captions_for_frame(scene, step),
        light_state=scene.light_state(step),
        targets=instance_targets(scene, step, spec, ids, owners),
    )
