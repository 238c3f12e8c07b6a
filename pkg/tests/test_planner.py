"""Trajectory sampling, scoring, selection, refinement, planning metrics."""

import numpy as np
import pytest

from avbev import autodiff as ad
from avbev.autodiff import Tensor
from avbev.geometry import BevGridSpec
from avbev.planner import (ACCEL_MAX, KAPPA_MAX, PLAN_DT, PLAN_STEPS, Costmap,
                           EmptySampleSetError, LaneRef, RefinementContext,
                           SamplerConfig, ScoreWeights, Trajectory,
                           TrajectoryRefiner, collision_rate, footprint_cells,
                           kinematics_feasible, l2_error, sample_trajectories,
                           score_trajectory, select_best, stop_trajectory)

SPEC = BevGridSpec(extent=40.0, resolution=0.5)


def straight_lane(length=60.0):
    xs = np.arange(-10.0, length, 1.0)
    return LaneRef(np.stack([xs, np.zeros_like(xs)], axis=1))


def brute_force_footprint(state, spec, length=4.0, width=1.8):
    """Full-grid scalar loop point-in-rectangle oracle."""
    x, y, yaw = state[0], state[1], state[2]
    n = spec.cells_per_side
    cells = []
    for r in range(n):
        for c in range(n):
            cx, cy = spec.cell_center(r, c)
            lon = np.cos(yaw) * (cx - x) + np.sin(yaw) * (cy - y)
            lat = -np.sin(yaw) * (cx - x) + np.cos(yaw) * (cy - y)
            if abs(lon) <= length / 2 and abs(lat) <= width / 2:
                cells.append((r, c))
    return set(cells)


# ---------------------------------------------------------------------------
# lane reference
# ---------------------------------------------------------------------------

def test_lane_projection_signs():
    lane = straight_lane()
    s, d = lane.project((5.0, 2.0))
    assert d == pytest.approx(2.0)       # left of travel direction: positive
    s2, d2 = lane.project((5.0, -1.0))
    assert d2 == pytest.approx(-1.0)
    assert s2 == pytest.approx(s)


def test_lane_spacing_validated():
    with pytest.raises(ValueError, match="2 m"):
        LaneRef(np.array([[0.0, 0.0], [5.0, 0.0]]))


def test_lane_extrapolates_past_end():
    lane = straight_lane(length=20.0)
    pt, tan = lane.pose_at(lane.length + 5.0)
    np.testing.assert_allclose(pt, [24.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(tan, [1.0, 0.0], atol=1e-12)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_straight_lane_keep_is_constant_velocity():
    lane = straight_lane()
    v = 4.0
    trajs = sample_trajectories((0.0, 0.0, 0.0, v), [lane])
    keep = [t for t in trajs
            if t.lateral_offset == 0.0 and t.profile == "target:1"]
    assert len(keep) == 1
    expected = np.stack([v * PLAN_DT * np.arange(7), np.zeros(7)], axis=1)
    np.testing.assert_allclose(keep[0].positions, expected, atol=1e-9)
    np.testing.assert_allclose(keep[0].speeds, v, atol=1e-9)


def test_zero_speed_stop_profile_stays_at_origin():
    lane = straight_lane()
    trajs = sample_trajectories((0.0, 0.0, 0.0, 0.0), [lane])
    stop = [t for t in trajs if t.profile == "stop" and t.lateral_offset == 0.0]
    assert len(stop) == 1
    np.testing.assert_allclose(stop[0].positions, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_all_samples_within_kinematic_bounds(seed):
    rng = np.random.default_rng(seed)
    v = float(rng.uniform(0.0, 8.0))
    yaw = float(rng.uniform(-0.15, 0.15))
    lane = straight_lane()
    trajs = sample_trajectories((0.0, rng.uniform(-1.0, 1.0), yaw, v), [lane])
    for t in trajs:
        assert np.all(t.speeds >= -1e-9)
        accel = np.diff(t.speeds) / PLAN_DT
        assert np.all(np.abs(accel) <= ACCEL_MAX + 1e-6)
        pos = t.positions
        for i in range(1, 6):
            ds = np.linalg.norm(pos[i + 1] - pos[i])
            if ds < 0.1:
                continue
            dyaw = t.states[i + 1, 2] - t.states[i, 2]
            dyaw = np.arctan2(np.sin(dyaw), np.cos(dyaw))
            assert abs(dyaw) / ds <= KAPPA_MAX + 1e-9


def test_lane_keep_candidate_always_present():
    for seed in range(30):
        rng = np.random.default_rng(seed + 1000)
        v = float(rng.uniform(0.0, 8.0))
        trajs = sample_trajectories((0.0, 0.0, 0.0, v), [straight_lane()])
        assert any(t.lateral_offset == 0.0 and t.profile == "target:1"
                   for t in trajs)


def test_first_state_is_ego_state():
    ego = (1.0, -0.5, 0.1, 3.0)
    for t in sample_trajectories(ego, [straight_lane()]):
        np.testing.assert_allclose(t.states[0], ego, atol=1e-12)


def test_no_lane_rejected():
    with pytest.raises(ValueError):
        sample_trajectories((0, 0, 0, 1.0), [])


def test_sampler_drops_infeasible_and_can_empty():
    # a tight curvature limit kills every lateral move at crawling speed
    cfg = SamplerConfig(lateral_offsets=(-1.5, 1.5), speed_factors=(1.0,),
                        include_stop=False, kappa_max=1e-4)
    with pytest.raises(EmptySampleSetError):
        sample_trajectories((0.0, 0.0, 0.0, 0.8), [straight_lane()], cfg)
    fallback = stop_trajectory((0.0, 0.0, 0.0, 0.8))
    assert kinematics_feasible(fallback.states)


# ---------------------------------------------------------------------------
# scoring and selection
# ---------------------------------------------------------------------------

def _flat_costmap(value=0.0):
    n = SPEC.cells_per_side
    return Costmap(np.full((n, n), float(value)), SPEC)


def test_zero_costmap_comfort_only():
    lane = straight_lane()
    trajs = sample_trajectories((0.0, 0.0, 0.0, 4.0), [lane])
    keep = next(t for t in trajs
                if t.lateral_offset == 0.0 and t.profile == "target:1")
    cost = score_trajectory(keep, _flat_costmap(0.0)).item()
    assert cost == pytest.approx(0.0, abs=1e-9)


def test_constant_shift_adds_six_c():
    lane = straight_lane()
    trajs = sample_trajectories((0.0, 0.0, 0.0, 3.0), [lane])
    w = ScoreWeights()
    c = 0.7
    for t in trajs[:6]:
        base = score_trajectory(t, _flat_costmap(0.0), w).item()
        shifted = score_trajectory(t, _flat_costmap(c), w).item()
        assert shifted - base == pytest.approx(6 * c, abs=1e-9)


def test_costmap_corridor_prefers_corridor_follower():
    # cheap corridor along the lane, expensive elsewhere
    n = SPEC.cells_per_side
    cost = np.full((n, n), 4.0)
    xc, yc = SPEC.center_grid()
    cost[np.abs(yc) < 1.0] = 0.0
    costmap = Costmap(cost, SPEC)
    trajs = sample_trajectories((0.0, 0.0, 0.0, 4.0), [straight_lane()])
    best = select_best(trajs, costmap)
    assert best.lateral_offset == 0.0
    # exhaustive check
    scores = [score_trajectory(t, costmap).item() for t in trajs]
    assert min(scores) == pytest.approx(
        score_trajectory(best, costmap).item())


def test_select_best_singleton():
    t = stop_trajectory((0, 0, 0, 2.0))
    assert select_best([t], _flat_costmap()) is t


@pytest.mark.parametrize("seed", range(20))
def test_select_best_matches_exhaustive_argmin(seed):
    rng = np.random.default_rng(seed)
    n = SPEC.cells_per_side
    costmap = Costmap(rng.uniform(0, 3, (n, n)), SPEC)
    trajs = sample_trajectories((0.0, 0.0, 0.0, float(rng.uniform(1, 7))),
                                [straight_lane()])
    best = select_best(trajs, costmap)
    best_score = score_trajectory(best, costmap).item()
    for t in trajs:
        assert best_score <= score_trajectory(t, costmap).item() + 1e-12


def test_argmin_invariant_under_constant_shift():
    rng = np.random.default_rng(77)
    n = SPEC.cells_per_side
    base = rng.uniform(0, 2, (n, n))
    trajs = sample_trajectories((0.0, 0.0, 0.0, 5.0), [straight_lane()])
    b1 = select_best(trajs, Costmap(base, SPEC))
    b2 = select_best(trajs, Costmap(base + 3.3, SPEC))
    np.testing.assert_array_equal(b1.states, b2.states)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def _planned(v=1.0):
    states = np.zeros((7, 4))
    states[:, 0] = v * PLAN_DT * np.arange(7)
    states[:, 3] = v
    return Trajectory(states, profile="target:1")


def test_refiner_zero_init_is_identity():
    rng = np.random.default_rng(0)
    ref = TrajectoryRefiner(rng, front_dim=4)
    ctx = RefinementContext(np.zeros(4), "none")
    out = ref.refine(_planned(2.0), ctx)
    np.testing.assert_allclose(out.positions, _planned(2.0).positions,
                               atol=1e-12)


def test_refiner_delta_bound_any_parameters():
    rng = np.random.default_rng(1)
    ref = TrajectoryRefiner(rng, front_dim=4, delta_max=0.5)
    for k in (ref.out.w, ref.out.b):
        k.data[...] = rng.standard_normal(k.data.shape) * 50.0
    planned = _planned(1.2)
    ctx = RefinementContext(rng.standard_normal(4), "red")
    deltas = ref.deltas(planned, ctx)
    prev = np.zeros(2)
    for d in deltas:
        step_change = np.linalg.norm(d.data[0] - prev)
        assert step_change <= 0.5 * np.sqrt(2) + 1e-9
        assert np.all(np.abs(d.data[0] - prev) <= 0.5 + 1e-12)
        prev = d.data[0]


def test_refiner_never_moves_first_state():
    rng = np.random.default_rng(2)
    ref = TrajectoryRefiner(rng, front_dim=4)
    ref.out.w.data[...] = rng.standard_normal(ref.out.w.data.shape)
    planned = _planned(1.0)
    out = ref.refine(planned, RefinementContext(np.zeros(4), "green"))
    np.testing.assert_array_equal(out.states[0], planned.states[0])


def test_refined_output_feasible_after_clamp():
    rng = np.random.default_rng(3)
    ref = TrajectoryRefiner(rng, front_dim=4)
    for k in (ref.out.w, ref.out.b):
        k.data[...] = rng.standard_normal(k.data.shape) * 10.0
    out = ref.refine(_planned(1.5), RefinementContext(np.zeros(4), "red"))
    assert np.all(out.speeds >= -1e-9)
    assert np.all(np.abs(np.diff(out.speeds)) / PLAN_DT <= ACCEL_MAX + 1e-6)


def test_light_onehot():
    assert RefinementContext(np.zeros(2), "red").light_onehot().tolist() == \
        [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        RefinementContext(np.zeros(2), "blue").light_onehot()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_l2_identical_zero():
    t = _planned(3.0)
    out = l2_error(t, t)
    assert out == {"1s": 0.0, "2s": 0.0, "3s": 0.0, "avg": 0.0}


def test_l2_constant_offset():
    a = _planned(2.0)
    b = Trajectory(a.states + np.array([0.0, 1.0, 0.0, 0.0]))
    out = l2_error(a, b)
    for k in ("1s", "2s", "3s", "avg"):
        assert out[k] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_l2_matches_direct_recomputation(seed):
    rng = np.random.default_rng(seed)
    a = Trajectory(rng.standard_normal((7, 4)))
    b = Trajectory(rng.standard_normal((7, 4)))
    out = l2_error(a, b)
    for h, idx in (("1s", 2), ("2s", 4), ("3s", 6)):
        d = np.sqrt(((a.states[idx, :2] - b.states[idx, :2]) ** 2).sum())
        assert out[h] == pytest.approx(d, abs=1e-12)
    assert out["avg"] == pytest.approx((out["1s"] + out["2s"] + out["3s"]) / 3)


def test_collision_rate_empty_occupancy():
    occ = np.zeros((6, SPEC.cells_per_side, SPEC.cells_per_side), dtype=bool)
    out = collision_rate(_planned(3.0), occ, SPEC)
    assert out == {"1s": 0.0, "2s": 0.0, "3s": 0.0, "avg": 0.0}


def test_collision_rate_fully_occupied():
    occ = np.ones((6, SPEC.cells_per_side, SPEC.cells_per_side), dtype=bool)
    out = collision_rate(_planned(3.0), occ, SPEC)
    assert out == {"1s": 100.0, "2s": 100.0, "3s": 100.0, "avg": 100.0}


def test_collision_only_at_step_4():
    # an obstacle clipped only by the step-4 footprint
    t = _planned(4.0)
    n = SPEC.cells_per_side
    occ = np.zeros((6, n, n), dtype=bool)
    state4 = t.states[4]
    r, c = SPEC.cell_of(state4[0], state4[1])
    occ[3, r, c] = True
    out = collision_rate(t, occ, SPEC)
    assert out["1s"] == 0.0
    assert out["2s"] == pytest.approx(100.0 / 4)
    assert out["3s"] == pytest.approx(100.0 / 6)


@pytest.mark.parametrize("seed", range(12))
def test_footprint_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    state = (rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0, 2 * np.pi))
    rr, cc = footprint_cells(state, SPEC)
    got = set(zip(rr.tolist(), cc.tolist()))
    assert got == brute_force_footprint(state, SPEC)


def test_collision_rate_monotone_in_occupancy():
    rng = np.random.default_rng(5)
    t = _planned(5.0)
    n = SPEC.cells_per_side
    occ = rng.uniform(0, 1, (6, n, n)) > 0.995
    base = collision_rate(t, occ, SPEC)
    denser = occ | (rng.uniform(0, 1, (6, n, n)) > 0.99)
    more = collision_rate(t, denser, SPEC)
    for k in ("1s", "2s", "3s"):
        assert more[k] >= base[k]


def test_costmap_scoring_differentiable():
    rng = np.random.default_rng(6)
    n = SPEC.cells_per_side
    cm = Tensor(rng.uniform(0, 1, (n, n)))
    t = _planned(3.0)

    def fn(p):
        return score_trajectory(t, Costmap(p[0], SPEC))

    from avbev.autodiff import grad_check
    assert grad_check(fn, [cm]) <= 1e-4
