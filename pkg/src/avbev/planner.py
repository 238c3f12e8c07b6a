"""Lane-aware trajectory sampling, costmap scoring, selection, refinement.

Candidates combine lateral quintic polynomials (settling on a target lane
offset by the horizon end) with longitudinal quartic speed profiles plus an
explicit hard-stop profile, in the sampled-Frenet style of street-scenario
planners.  Every emitted candidate satisfies the curvature / acceleration /
non-negative-speed bounds; infeasible combinations are dropped.

Planner timeline: 7 states at 0.5 s spacing (t = 0 .. 3 s).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import BevGrid, BevGridSpec

PLAN_DT = 0.5
PLAN_STEPS = 6          # future states; 7 including t=0
HORIZON_SECONDS = (1.0, 2.0, 3.0)
KAPPA_MAX = 0.2         # 1/m
ACCEL_MAX = 3.0         # m/s^2
STOP_DECEL = 2.5        # m/s^2 used by the hard-stop profile
EGO_LENGTH = 4.0
EGO_WIDTH = 1.8
BOUNDARY_PENALTY = 10.0


class EmptySampleSetError(RuntimeError):
    """No feasible candidate was produced; caller should fall back to a stop."""


@dataclass
class LaneRef:
    """Arc-length parameterized centerline polyline in the ego frame."""

    centerline: np.ndarray          # (N, 2) meters
    width: float = 3.5

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        if self.centerline.ndim != 2 or self.centerline.shape[0] < 2:
            raise ValueError("centerline needs at least two points")
        seg = np.diff(self.centerline, axis=0)
        self._seg_len = np.linalg.norm(seg, axis=1)
        if np.any(self._seg_len <= 1e-9):
            raise ValueError("centerline arc-length must be strictly increasing")
        if np.any(self._seg_len > 2.0 + 1e-9):
            raise ValueError("consecutive centerline points must be <= 2 m apart")
        self._seg_dir = seg / self._seg_len[:, None]
        self._s = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def pose_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """(point, unit tangent) at arc length s; extrapolates past the ends."""
        if s <= 0.0:
            return self.centerline[0] + s * self._seg_dir[0], self._seg_dir[0]
        if s >= self.length:
            return (self.centerline[-1] + (s - self.length) * self._seg_dir[-1],
                    self._seg_dir[-1])
        i = int(np.searchsorted(self._s, s, side="right")) - 1
        i = min(i, len(self._seg_len) - 1)
        pt = self.centerline[i] + (s - self._s[i]) * self._seg_dir[i]
        return pt, self._seg_dir[i]

    def project(self, point) -> tuple[float, float]:
        """(s, signed lateral offset); positive offsets are left of the lane."""
        p = np.asarray(point, dtype=np.float64)
        rel = p[None, :] - self.centerline[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg_dir)
                    / self._seg_len, 0.0, 1.0)
        proj = self.centerline[:-1] + (t * self._seg_len)[:, None] * self._seg_dir
        d2 = np.sum((p[None, :] - proj) ** 2, axis=1)
        i = int(np.argmin(d2))
        s = float(self._s[i] + t[i] * self._seg_len[i])
        tangent = self._seg_dir[i]
        off = p - proj[i]
        d = float(tangent[0] * off[1] - tangent[1] * off[0])
        return s, d


@dataclass
class Trajectory:
    """7 states of (x, y, yaw, speed) at 0.5 s spacing starting at t=0."""

    states: np.ndarray                 # (7, 4)
    lateral_offset: float = 0.0
    profile: str = "keep"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape != (PLAN_STEPS + 1, 4):
            raise ValueError(f"trajectory needs shape (7,4), got {self.states.shape}")
        if not np.isfinite(self.states).all():
            raise ValueError("trajectory contains non-finite states")

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def speeds(self) -> np.ndarray:
        return self.states[:, 3]

    def progress(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def timestamps(self) -> np.ndarray:
        return PLAN_DT * np.arange(PLAN_STEPS + 1)


@dataclass
class Costmap:
    cost: Tensor | np.ndarray          # (H, W), lower is better
    spec: BevGridSpec

    def tensor(self) -> Tensor:
        return self.cost if isinstance(self.cost, Tensor) else ad.constant(self.cost)


@dataclass
class ScoreWeights:
    lateral: float = 0.1
    jerk: float = 0.05


@dataclass
class SamplerConfig:
    lateral_offsets: tuple = (-1.5, -0.75, 0.0, 0.75, 1.5)
    speed_factors: tuple = (0.0, 0.5, 1.0, 1.25)
    include_stop: bool = True
    kappa_max: float = KAPPA_MAX
    accel_max: float = ACCEL_MAX


def _quintic(d0, dd0, ddd0, d1, t_end):
    """Quintic coefficients from (d0, dd0, ddd0) to (d1, 0, 0) at t_end."""
    a0, a1, a2 = d0, dd0, ddd0 / 2.0
    t = t_end
    rhs = np.array([
        d1 - (a0 + a1 * t + a2 * t * t),
        -(a1 + 2 * a2 * t),
        -2 * a2,
    ])
    m = np.array([
        [t**3, t**4, t**5],
        [3 * t**2, 4 * t**3, 5 * t**4],
        [6 * t, 12 * t**2, 20 * t**3],
    ])
    a3, a4, a5 = np.linalg.solve(m, rhs)
    return np.array([a0, a1, a2, a3, a4, a5])


def _poly_eval(coeffs, ts):
    return sum(c * ts**i for i, c in enumerate(coeffs))


def _quartic_progress(v0, v_target, t_end, ts):
    """s(t) with s(0)=0, s'(0)=v0, s''(0)=0, s'(T)=v_target, s''(T)=0."""
    m = np.array([[3 * t_end**2, 4 * t_end**3],
                  [6 * t_end, 12 * t_end**2]])
    rhs = np.array([v_target - v0, 0.0])
    a3, a4 = np.linalg.solve(m, rhs)
    return v0 * ts + a3 * ts**3 + a4 * ts**4


def _stop_progress(v0, ts):
    t_stop = v0 / STOP_DECEL if v0 > 0 else 0.0
    s = np.where(ts < t_stop,
                 v0 * ts - 0.5 * STOP_DECEL * ts**2,
                 0.5 * v0 * t_stop)
    return s


def _states_from_positions(positions: np.ndarray, yaw0: float,
                           speed0: float) -> np.ndarray:
    """Fill yaw and speed from consecutive displacements."""
    states = np.zeros((len(positions), 4))
    states[:, :2] = positions
    states[0, 2] = yaw0
    states[0, 3] = speed0
    prev_yaw = yaw0
    for i in range(1, len(positions)):
        d = positions[i] - positions[i - 1]
        dist = np.linalg.norm(d)
        yaw = np.arctan2(d[1], d[0]) if dist > 1e-9 else prev_yaw
        states[i, 2] = yaw
        states[i, 3] = dist / PLAN_DT
        prev_yaw = yaw
    return states


def kinematics_feasible(states: np.ndarray, kappa_max: float = KAPPA_MAX,
                        accel_max: float = ACCEL_MAX) -> bool:
    speeds = states[:, 3]
    if np.any(speeds < -1e-9):
        return False
    accel = np.diff(speeds) / PLAN_DT
    if np.any(np.abs(accel) > accel_max + 1e-6):
        return False
    pos = states[:, :2]
    for i in range(1, len(states) - 1):
        ds = np.linalg.norm(pos[i + 1] - pos[i])
        if ds < 0.1:
            continue
        dyaw = states[i + 1, 2] - states[i, 2]
        dyaw = np.arctan2(np.sin(dyaw), np.cos(dyaw))
        if abs(dyaw) / ds > kappa_max + 1e-9:
            return False
    return True


def sample_trajectories(ego_state, lanes: list[LaneRef],
                        config: SamplerConfig | None = None) -> list[Trajectory]:
    """Cartesian product of lateral end-offsets and speed profiles per lane.

    ego_state is (x, y, yaw, speed).  Raises EmptySampleSetError when no
    candidate survives the feasibility filter.
    """
    config = config or SamplerConfig()
    if not lanes:
        raise ValueError("sample_trajectories requires at least one lane")
    x0, y0, yaw0, v0 = (float(v) for v in ego_state)
    if v0 < 0:
        raise ValueError("ego speed must be non-negative")
    ts = PLAN_DT * np.arange(PLAN_STEPS + 1)
    t_end = ts[-1]
    out: list[Trajectory] = []
    for lane in lanes:
        s0, d0 = lane.project((x0, y0))
        _, tan0 = lane.pose_at(s0)
        lane_yaw = np.arctan2(tan0[1], tan0[0])
        dd0 = v0 * np.sin(yaw0 - lane_yaw)
        profiles = [(f"target:{f:g}", _quartic_progress(v0, f * v0, t_end, ts))
                    for f in config.speed_factors]
        if config.include_stop:
            profiles.append(("stop", _stop_progress(v0, ts)))
        for offset in config.lateral_offsets:
            dcoef = _quintic(d0, dd0, 0.0, offset, t_end)
            dvals = _poly_eval(dcoef, ts)
            for tag, svals in profiles:
                positions = np.zeros((PLAN_STEPS + 1, 2))
                positions[0] = (x0, y0)
                for i in range(1, PLAN_STEPS + 1):
                    pt, tan = lane.pose_at(s0 + svals[i])
                    normal = np.array([-tan[1], tan[0]])
                    positions[i] = pt + dvals[i] * normal
                states = _states_from_positions(positions, yaw0, v0)
                states[0] = (x0, y0, yaw0, v0)
                if not kinematics_feasible(states, config.kappa_max,
                                           config.accel_max):
                    continue
                out.append(Trajectory(states, lateral_offset=float(offset),
                                      profile=tag))
    if not out:
        raise EmptySampleSetError(
            "no kinematically feasible candidate; fall back to a full stop")
    return out


def stop_trajectory(ego_state) -> Trajectory:
    """Straight-line hard-stop fallback from the current state."""
    x0, y0, yaw0, v0 = (float(v) for v in ego_state)
    ts = PLAN_DT * np.arange(PLAN_STEPS + 1)
    s = _stop_progress(v0, ts)
    positions = np.stack([x0 + s * np.cos(yaw0), y0 + s * np.sin(yaw0)], axis=1)
    states = _states_from_positions(positions, yaw0, v0)
    states[0] = (x0, y0, yaw0, v0)
    return Trajectory(states, lateral_offset=0.0, profile="stop")


# ---------------------------------------------------------------------------
# scoring and selection
# ---------------------------------------------------------------------------

def _comfort_terms(traj: Trajectory, weights: ScoreWeights) -> float:
    accel = np.diff(traj.speeds) / PLAN_DT
    jerk_sq = float(np.sum(np.diff(accel) ** 2))
    return weights.lateral * traj.lateral_offset ** 2 + weights.jerk * jerk_sq


def score_trajectory(traj: Trajectory, costmap: Costmap,
                     weights: ScoreWeights | None = None) -> Tensor:
    """Bilinear costmap samples over the 6 future states plus comfort terms.

    States outside the grid are clamped to the border and charged a fixed
    penalty each.  Returns a scalar Tensor (differentiable when the costmap
    is a Tensor); use ``.item()`` for the float value.
    """
    weights = weights or ScoreWeights()
    spec = costmap.spec
    n = spec.cells_per_side
    rows, cols = spec.fractional_cell(traj.positions[1:, 0],
                                      traj.positions[1:, 1])
    outside = ((rows < 0) | (rows > n - 1) | (cols < 0) | (cols > n - 1))
    rows = np.clip(rows, 0.0, n - 1.0)
    cols = np.clip(cols, 0.0, n - 1.0)
    cm = costmap.tensor()
    samples = ad.bilinear_gather(ad.reshape(cm, (1, n, n)), rows, cols)
    total = ad.sum_(samples)
    penalty = BOUNDARY_PENALTY * float(outside.sum()) + _comfort_terms(traj, weights)
    return ad.add(total, ad.constant(penalty))


def score_breakdown(traj: Trajectory, costmap: Costmap,
                    weights: ScoreWeights | None = None) -> dict:
    """Cost terms separated for reporting: map, comfort, boundary."""
    weights = weights or ScoreWeights()
    spec = costmap.spec
    n = spec.cells_per_side
    rows, cols = spec.fractional_cell(traj.positions[1:, 0],
                                      traj.positions[1:, 1])
    outside = ((rows < 0) | (rows > n - 1) | (cols < 0) | (cols > n - 1))
    rows = np.clip(rows, 0.0, n - 1.0)
    cols = np.clip(cols, 0.0, n - 1.0)
    cm = costmap.tensor()
    samples = ad.bilinear_gather(ad.reshape(cm, (1, n, n)), rows, cols)
    accel = np.diff(traj.speeds) / PLAN_DT
    return {
        "costmap": float(samples.data.sum()),
        "lateral": float(weights.lateral * traj.lateral_offset ** 2),
        "jerk": float(weights.jerk * np.sum(np.diff(accel) ** 2)),
        "boundary": float(BOUNDARY_PENALTY * outside.sum()),
    }


def planner_report(candidates: list[Trajectory], best: Trajectory,
                   costmap: Costmap, l2: dict | None = None,
                   cr: dict | None = None,
                   weights: ScoreWeights | None = None) -> dict:
    """Per-scenario planning summary (JSON-ready)."""
    breakdown = score_breakdown(best, costmap, weights)
    report = {
        "sampled_count": len(candidates),
        "chosen": {
            "states": [[round(v, 6) for v in s] for s in best.states.tolist()],
            "lateral_offset": best.lateral_offset,
            "profile": best.profile,
        },
        "cost_breakdown": {k: round(v, 6) for k, v in breakdown.items()},
        "total_cost": round(sum(breakdown.values()), 6),
    }
    if l2 is not None:
        report["l2"] = {k: round(v, 6) for k, v in l2.items()}
    if cr is not None:
        report["cr"] = {k: round(v, 6) for k, v in cr.items()}
    return report


def select_best(candidates: list[Trajectory], costmap: Costmap,
                weights: ScoreWeights | None = None) -> Trajectory:
    """Argmin of score; ties broken by smaller |lateral offset|, then larger
    terminal progress, then sample index."""
    if not candidates:
        raise ValueError("select_best requires a non-empty candidate set")
    best = None
    for i, traj in enumerate(candidates):
        key = (score_trajectory(traj, costmap, weights).item(),
               abs(traj.lateral_offset), -traj.progress(), i)
        if best is None or key < best[0]:
            best = (key, traj)
    return best[1]


class CostmapHead:
    """Learned costmap as a small conv head over the fused BEV feature."""

    def __init__(self, rng, channels: int, hidden: int = 16, name: str = "cost_head"):
        self.conv1 = nn.Conv2d(rng, channels, hidden, 3, f"{name}.conv1", padding=1)
        self.conv2 = nn.Conv2d(rng, hidden, 1, 1, f"{name}.conv2")

    def parameters(self):
        return {**self.conv1.parameters(), **self.conv2.parameters()}

    def __call__(self, grid: BevGrid) -> Costmap:
        x = ad.reshape(grid.features, (1,) + grid.features.shape)
        x = self.conv2(ad.relu(self.conv1(x)))
        n = grid.spec.cells_per_side
        return Costmap(ad.reshape(x, (n, n)), grid.spec)


# ---------------------------------------------------------------------------
# recurrent refinement
# ---------------------------------------------------------------------------

@dataclass
class RefinementContext:
    """Pooled front-camera feature plus the traffic-light state channel."""

    front_feature: np.ndarray | Tensor
    light_state: str = "none"            # red | green | none

    LIGHT_STATES = ("red", "green", "none")

    def light_onehot(self) -> np.ndarray:
        if self.light_state not in self.LIGHT_STATES:
            raise ValueError(f"unknown light state {self.light_state!r}")
        v = np.zeros(3)
        v[self.LIGHT_STATES.index(self.light_state)] = 1.0
        return v


class TrajectoryRefiner:
    """GRU over the 6 future states emitting bounded position deltas.

    Per-step deltas are tanh-bounded by ``delta_max`` and accumulate along
    the horizon, so the displacement *change* between consecutive states
    never exceeds delta_max while total displacement can grow.  The output
    layer starts at zero, making refinement the identity at initialization.
    """

    def __init__(self, rng, front_dim: int, hidden: int = 32,
                 delta_max: float = 0.5, name: str = "refiner"):
        self.front_dim = front_dim
        self.delta_max = delta_max
        in_dim = 3 + front_dim + 3      # (dx, dy, speed) + front feature + light
        self.cell = nn.GruCell(rng, in_dim, hidden, f"{name}.gru")
        self.out = nn.Linear(rng, hidden, 2, f"{name}.out", zero_init=True)
        self.hidden = hidden

    def parameters(self):
        return {**self.cell.parameters(), **self.out.parameters()}

    def deltas(self, traj: Trajectory, ctx: RefinementContext) -> list[Tensor]:
        """Cumulative (1,2) position deltas for states 1..6, differentiable."""
        front = ctx.front_feature if isinstance(ctx.front_feature, Tensor) \
            else ad.constant(np.asarray(ctx.front_feature, dtype=np.float64))
        if front.size != self.front_dim:
            raise ad.ShapeMismatchError(
                f"front feature dim {front.size} != {self.front_dim}")
        front = ad.reshape(front, (1, self.front_dim))
        light = ad.constant(ctx.light_onehot().reshape(1, 3))
        h = ad.constant(np.zeros((1, self.hidden)))
        cum = ad.constant(np.zeros((1, 2)))
        out = []
        for k in range(1, PLAN_STEPS + 1):
            step = traj.positions[k] - traj.positions[k - 1]
            base = ad.constant(np.array([[step[0], step[1],
                                          traj.speeds[k]]]))
            inp = ad.concat([base, front, light], axis=1)
            h = self.cell(inp, h)
            u = ad.mul(ad.tanh(self.out(h)), self.delta_max)
            cum = ad.add(cum, u)
            out.append(cum)
        return out

    def refine(self, traj: Trajectory, ctx: RefinementContext,
               iterations: int = 1) -> Trajectory:
        """Apply bounded deltas, rebuild yaw/speed, clamp to feasibility.

        Each iteration recomputes deltas against the original geometry, so
        the per-step bound holds for any iteration count.
        """
        positions = traj.positions.copy()
        for _ in range(max(iterations, 1)):
            ref = Trajectory(np.column_stack([positions,
                                              traj.states[:, 2:4]]),
                             traj.lateral_offset, traj.profile)
            deltas = self.deltas(ref, ctx)
            positions = traj.positions.copy()
            for k, d in enumerate(deltas, start=1):
                positions[k] = traj.positions[k] + d.data[0]
        positions[0] = traj.positions[0]
        positions = _clamp_speed_profile(positions, traj.speeds[0])
        states = _states_from_positions(positions, traj.states[0, 2],
                                        traj.speeds[0])
        states[0] = traj.states[0]
        return Trajectory(states, traj.lateral_offset, traj.profile + "+refined")


def _clamp_speed_profile(positions: np.ndarray, v0: float,
                         accel_max: float = ACCEL_MAX) -> np.ndarray:
    """Limit per-step speed changes to the acceleration bound."""
    out = positions.copy()
    prev_v = v0
    for k in range(1, len(positions)):
        d = out[k] - out[k - 1]
        dist = np.linalg.norm(d)
        v = dist / PLAN_DT
        lo = max(0.0, prev_v - accel_max * PLAN_DT)
        hi = prev_v + accel_max * PLAN_DT
        if v < lo or v > hi:
            target = np.clip(v, lo, hi)
            if dist > 1e-12:
                d = d * (target * PLAN_DT / dist)
            out[k] = out[k - 1] + d
            v = target
        prev_v = v
    return out


# ---------------------------------------------------------------------------
# planning metrics
# ---------------------------------------------------------------------------

def l2_error(traj: Trajectory, gt: Trajectory) -> dict[str, float]:
    """Euclidean displacement at the 1 / 2 / 3 s horizons plus their mean."""
    if not np.allclose(traj.timestamps(), gt.timestamps()):
        raise ValueError("trajectory timestamps do not match")
    out = {}
    vals = []
    for horizon in HORIZON_SECONDS:
        idx = int(round(horizon / PLAN_DT))
        d = float(np.linalg.norm(traj.positions[idx] - gt.positions[idx]))
        out[f"{horizon:g}s"] = d
        vals.append(d)
    out["avg"] = float(np.mean(vals))
    return out


def footprint_cells(state, spec: BevGridSpec, length: float = EGO_LENGTH,
                    width: float = EGO_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Grid cells whose centers fall inside the yaw-aligned ego rectangle."""
    x, y, yaw = float(state[0]), float(state[1]), float(state[2])
    half_diag = 0.5 * np.hypot(length, width)
    n = spec.cells_per_side
    r_lo, c_lo = spec.cell_of(x + half_diag, y + half_diag)
    r_hi, c_hi = spec.cell_of(x - half_diag, y - half_diag)
    r_lo, r_hi = int(np.clip(r_lo, 0, n - 1)), int(np.clip(r_hi, 0, n - 1))
    c_lo, c_hi = int(np.clip(c_lo, 0, n - 1)), int(np.clip(c_hi, 0, n - 1))
    rr, cc = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1),
                         indexing="ij")
    cx, cy = spec.cell_center(rr, cc)
    lon = np.cos(yaw) * (cx - x) + np.sin(yaw) * (cy - y)
    lat = -np.sin(yaw) * (cx - x) + np.cos(yaw) * (cy - y)
    inside = (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)
    return rr[inside], cc[inside]


def collision_rate(traj: Trajectory, occupancy: np.ndarray, spec: BevGridSpec,
                   length: float = EGO_LENGTH,
                   width: float = EGO_WIDTH) -> dict[str, float]:
    """Fraction of future steps whose footprint overlaps occupied cells.

    ``occupancy`` holds one grid per future step: (6, H, W) booleans in the
    frame of the trajectory.  Percentages per horizon.
    """
    n = spec.cells_per_side
    if occupancy.shape != (PLAN_STEPS, n, n):
        raise ValueError(
            f"occupancy shape {occupancy.shape} != ({PLAN_STEPS},{n},{n})")
    collides = np.zeros(PLAN_STEPS, dtype=bool)
    for k in range(1, PLAN_STEPS + 1):
        rr, cc = footprint_cells(traj.states[k], spec, length, width)
        collides[k - 1] = bool(occupancy[k - 1, rr, cc].any())
    out = {}
    vals = []
    for horizon in HORIZON_SECONDS:
        steps = int(round(horizon / PLAN_DT))
        cr = 100.0 * float(collides[:steps].mean())
        out[f"{horizon:g}s"] = cr
        vals.append(cr)
    out["avg"] = float(np.mean(vals))
    return out
