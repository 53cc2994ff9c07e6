import math

import numpy as np
import pytest

from swarm_mpc import dynamics, optimizer
from swarm_mpc.dynamics import ControlInput, KinematicParams, VehicleState, wrap_angle
from swarm_mpc.optimizer import (
    HorizonPlan,
    NoiseConfig,
    OptimizerConfig,
    OptimizerError,
    cost_collision_obstacle,
    cost_collision_vehicle,
    cost_target,
    generate_trajectory,
    plan_gradient,
    solve_horizon,
    total_cost,
)
from swarm_mpc.scenario import Obstacle, Scenario, TargetPose, VehicleTask, goal_reached, sample_scenario

from conftest import rel_err

KIN = KinematicParams()
CFG = OptimizerConfig()


# ---------------------------------------------------------------------------
# independent naive-loop oracles (kept deliberately dumb)


def naive_cost_target(states, targets, cfg):
    total = 0.0
    for row in states:
        for s, t in zip(row, targets):
            total += math.hypot(s.x - t.x, s.y - t.y) * cfg.w_pos
            total += abs(wrap_angle(s.theta - t.theta)) * cfg.w_orient
    return total


def naive_cost_obstacle(states, obstacles, cfg):
    total = 0.0
    for row in states:
        for s in row:
            for ob in obstacles:
                d = math.hypot(s.x - ob.x, s.y - ob.y)
                if d <= ob.r:
                    total += cfg.collision_cap
                elif d - ob.r < cfg.r_mar_obs:
                    total += 1.0 / (d - ob.r) - 1.0 / cfg.r_mar_obs
    return total * cfg.w_col_obs


def naive_cost_vehicle(states, cfg):
    total = 0.0
    for row in states:
        n = len(row)
        for i in range(n - 1):
            for j in range(i + 1, n):
                d = math.hypot(row[i].x - row[j].x, row[i].y - row[j].y)
                if d <= cfg.min_pair_distance:
                    total += cfg.collision_cap
                elif d < cfg.r_mar_veh:
                    total += 1.0 / d - 1.0 / cfg.r_mar_veh
    return total * cfg.w_col_veh


def random_state_grid(rng, horizon, n_vehicles, spread=12.0):
    return [
        [
            VehicleState(
                x=float(rng.uniform(-spread, spread)),
                y=float(rng.uniform(-spread, spread)),
                theta=float(rng.uniform(-4.0, 4.0)),
                v=float(rng.uniform(-2.0, 4.0)),
            )
            for _ in range(n_vehicles)
        ]
        for _ in range(horizon)
    ]


def random_targets(rng, n):
    return [
        TargetPose(float(rng.uniform(-12, 12)), float(rng.uniform(-12, 12)), float(rng.uniform(-4, 4)))
        for _ in range(n)
    ]


def random_obstacles(rng, n):
    return [
        Obstacle(float(rng.uniform(-12, 12)), float(rng.uniform(-12, 12)), float(rng.uniform(1, 3)))
        for _ in range(n)
    ]


# ---------------------------------------------------------------------------
# cost term examples


def test_cost_target_zero_at_target():
    target = TargetPose(2.0, -1.0, 0.5)
    states = [[VehicleState(2.0, -1.0, 0.5, 1.0)]] * 7
    assert cost_target(states, [target], CFG) == 0.0


def test_cost_target_three_metres_east():
    states = [[VehicleState(3.0, 0.0, 0.0, 0.0)]]
    assert cost_target(states, [TargetPose(0.0, 0.0, 0.0)], CFG) == pytest.approx(3.0, rel=1e-15)


def test_cost_obstacle_zero_at_margin_boundary():
    ob = Obstacle(0.0, 0.0, 2.0)
    d = ob.r + CFG.r_mar_obs
    states = [[VehicleState(d, 0.0, 0.0, 0.0)]]
    assert cost_collision_obstacle(states, [ob], CFG) == 0.0


def test_cost_obstacle_half_margin_value():
    ob = Obstacle(0.0, 0.0, 2.0)
    states = [[VehicleState(ob.r + CFG.r_mar_obs / 2.0, 0.0, 0.0, 0.0)]]
    expected = CFG.w_col_obs * (2.0 / CFG.r_mar_obs - 1.0 / CFG.r_mar_obs)
    assert cost_collision_obstacle(states, [ob], CFG) == pytest.approx(expected, rel=1e-12)


def test_cost_obstacle_caps_inside_radius():
    ob = Obstacle(0.0, 0.0, 2.0)
    states = [[VehicleState(0.5, 0.0, 0.0, 0.0)]]
    assert cost_collision_obstacle(states, [ob], CFG) == pytest.approx(
        CFG.collision_cap * CFG.w_col_obs, rel=1e-12
    )


def test_cost_vehicle_zero_at_margin():
    states = [[VehicleState(0.0, 0.0, 0.0, 0.0), VehicleState(CFG.r_mar_veh, 0.0, 0.0, 0.0)]] * 3
    assert cost_collision_vehicle(states, CFG) == 0.0


def test_cost_vehicle_single_vehicle_is_zero():
    states = [[VehicleState(0.0, 0.0, 0.0, 0.0)]] * 5
    assert cost_collision_vehicle(states, CFG) == 0.0


def test_collision_terms_continuous_at_margin():
    ob = Obstacle(0.0, 0.0, 2.0)
    eps = 1e-9
    just_inside = cost_collision_obstacle(
        [[VehicleState(ob.r + CFG.r_mar_obs - eps, 0.0, 0.0, 0.0)]], [ob], CFG
    )
    assert 0.0 < just_inside < 1e-8
    d = CFG.r_mar_veh - eps
    inside_veh = cost_collision_vehicle(
        [[VehicleState(0.0, 0.0, 0.0, 0.0), VehicleState(d, 0.0, 0.0, 0.0)]], CFG
    )
    assert 0.0 < inside_veh < 1e-8


@pytest.mark.parametrize("n_veh,n_obs", [(1, 0), (1, 4), (2, 2), (3, 0), (3, 4)])
def test_cost_terms_match_naive_oracles(rng, n_veh, n_obs):
    for _ in range(20):
        states = random_state_grid(rng, 20, n_veh)
        targets = random_targets(rng, n_veh)
        obstacles = random_obstacles(rng, n_obs)
        a = cost_target(states, targets, CFG)
        b = naive_cost_target(states, targets, CFG)
        assert rel_err(np.array(a), np.array(b), floor=1.0) < 1e-12
        a = cost_collision_obstacle(states, obstacles, CFG)
        b = naive_cost_obstacle(states, obstacles, CFG)
        assert rel_err(np.array(a), np.array(b), floor=1.0) < 1e-12
        a = cost_collision_vehicle(states, CFG)
        b = naive_cost_vehicle(states, CFG)
        assert rel_err(np.array(a), np.array(b), floor=1.0) < 1e-12


# ---------------------------------------------------------------------------
# total cost and gradients


def _resting_scenario(tasks, obstacles=()):
    return Scenario(
        vehicles=tasks, obstacles=list(obstacles), world_half_extent=15.0, seed=0
    )


def test_total_cost_zero_at_rest_on_target():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(1.0, 2.0, 0.3, 0.0), target_x=1.0, target_y=2.0, target_theta=0.3)]
    )
    plan = HorizonPlan.zeros(CFG.horizon, 1)
    assert total_cost(plan, sc, KIN, CFG) == 0.0


def test_total_cost_is_sum_of_terms(rng):
    sc = sample_scenario(2, 2, rng_seed=3)
    plan = rng.uniform(-1, 1, size=(CFG.horizon, 2, 2))
    plan[:, :, 1] *= 0.8
    total = total_cost(plan, sc, KIN, CFG)

    # same rollout through the scalar transition
    states = []
    current = sc.start_states()
    for t in range(CFG.horizon):
        current = [
            dynamics.step(s, ControlInput(float(plan[t, i, 0]), float(plan[t, i, 1])), KIN)
            for i, s in enumerate(current)
        ]
        states.append(current)
    parts = (
        cost_target(states, sc.targets(), CFG)
        + cost_collision_obstacle(states, sc.obstacles, CFG)
        + cost_collision_vehicle(states, CFG)
    )
    assert total == pytest.approx(parts, rel=1e-9)


def _smooth_entry(plan, sc, t, i, k, h):
    """Reject finite-difference probes that straddle a non-smooth boundary."""
    for delta in (-h, 0.0, h):
        p = plan.copy()
        p[t, i, k] += delta
        states = []
        current = sc.start_states()
        for step_t in range(plan.shape[0]):
            current = [
                dynamics.step(s, ControlInput.clamped(p[step_t, j, 0], p[step_t, j, 1]), KIN)
                for j, s in enumerate(current)
            ]
            states.append(current)
        for row in states:
            for vi, s in enumerate(row):
                for ob in sc.obstacles:
                    if abs(math.hypot(s.x - ob.x, s.y - ob.y) - ob.r - CFG.r_mar_obs) < 1e-3:
                        return False
                for vj in range(vi + 1, len(row)):
                    d = math.hypot(s.x - row[vj].x, s.y - row[vj].y)
                    if abs(d - CFG.r_mar_veh) < 1e-3:
                        return False
                tgt = sc.targets()[vi]
                if math.hypot(s.x - tgt.x, s.y - tgt.y) < 1e-3:
                    return False
                if abs(abs(wrap_angle(s.theta - tgt.theta)) - math.pi) < 1e-3:
                    return False
    return True


def test_gradient_matches_central_differences(rng):
    h = 1e-5
    checked = 0
    for trial in range(20):
        n_veh = int(rng.integers(1, 4))
        n_obs = int(rng.integers(0, 5))
        sc = sample_scenario(n_veh, n_obs, rng_seed=100 + trial)
        plan = rng.uniform(-1, 1, size=(CFG.horizon, n_veh, 2))
        plan[:, :, 1] *= 0.8
        _, grad = plan_gradient(plan, sc, KIN, CFG)
        for _ in range(6):
            t = int(rng.integers(CFG.horizon))
            i = int(rng.integers(n_veh))
            k = int(rng.integers(2))
            if not _smooth_entry(plan, sc, t, i, k, h):
                continue
            pp = plan.copy()
            pp[t, i, k] += h
            pm = plan.copy()
            pm[t, i, k] -= h
            fd = (total_cost(pp, sc, KIN, CFG) - total_cost(pm, sc, KIN, CFG)) / (2 * h)
            assert rel_err(np.array(grad[t, i, k]), np.array(fd)) < 1e-4
            checked += 1
    assert checked >= 60  # the smoothness filter must not eat the test


# ---------------------------------------------------------------------------
# solver


def test_solver_keeps_resting_optimum():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=0.0, target_y=0.0, target_theta=0.0)]
    )
    res = solve_horizon(sc, None, CFG, KIN)
    assert res.cost <= 1e-3
    assert np.max(np.abs(res.plan.controls)) <= 1e-3


def test_solver_cost_monotone_and_bounded(rng):
    sc = sample_scenario(2, 1, rng_seed=8)
    res = solve_horizon(sc, None, CFG, KIN)
    assert all(b <= a + 1e-12 for a, b in zip(res.costs, res.costs[1:]))
    assert res.plan.within_bounds(CFG)


def test_solver_never_worse_than_warm_start(rng):
    sc = sample_scenario(2, 0, rng_seed=12)
    warm = HorizonPlan(np.clip(rng.uniform(-1, 1, (CFG.horizon, 2, 2)), -0.8, 0.8))
    res = solve_horizon(sc, warm, CFG, KIN)
    assert res.cost <= total_cost(warm, sc, KIN, CFG) + 1e-12


def test_solver_beats_scripted_bang_bang():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=5.0, target_y=0.0, target_theta=0.0)]
    )
    bang = np.zeros((CFG.horizon, 1, 2))
    bang[: CFG.horizon // 2, 0, 0] = 1.0
    bang[CFG.horizon // 2 :, 0, 0] = -1.0
    res = solve_horizon(sc, None, CFG, KIN)
    assert res.cost <= total_cost(bang, sc, KIN, CFG)


def test_single_vehicle_mpc_reaches_straight_ahead_goal():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=5.0, target_y=0.0, target_theta=0.0)]
    )
    states = sc.start_states()
    plan = None
    eta = 1.0
    reached = None
    for t in range(120):
        res = solve_horizon(sc, plan, CFG, KIN, states=states, eta0=eta)
        eta = res.step_size
        states = [dynamics.step(states[0], res.plan.first_step()[0], KIN)]
        if goal_reached(states[0], sc.targets()[0]):
            reached = t + 1
            break
        plan = res.plan.shifted()
    assert reached is not None and reached <= 120


def test_solver_rejects_bad_warm_start():
    sc = sample_scenario(1, 0, rng_seed=2)
    with pytest.raises(ValueError):
        solve_horizon(sc, HorizonPlan(np.zeros((3, 1, 2))), CFG, KIN)
    too_big = np.zeros((CFG.horizon, 1, 2))
    too_big[0, 0, 1] = 5.0
    with pytest.raises(ValueError):
        solve_horizon(sc, HorizonPlan(too_big), CFG, KIN)


def test_solver_aborts_on_non_finite_cost():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=1e308, target_y=0.0, target_theta=0.0)]
    )
    with pytest.raises(OptimizerError) as err:
        solve_horizon(sc, None, CFG, KIN)
    assert "iteration" in str(err.value)


def test_lbfgsb_backend_solves_at_target():
    cfg = OptimizerConfig(method="lbfgsb")
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=0.0, target_y=0.0, target_theta=0.0)]
    )
    res = solve_horizon(sc, None, cfg, KIN)
    assert res.cost <= 1e-3
    sc2 = sample_scenario(1, 1, rng_seed=4)
    zero_cost = total_cost(HorizonPlan.zeros(cfg.horizon, 1), sc2, KIN, cfg)
    assert solve_horizon(sc2, None, cfg, KIN).cost <= zero_cost


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        OptimizerConfig(method="newton")


# ---------------------------------------------------------------------------
# trajectory generation


def test_generate_trajectory_counts_and_success():
    sc = _resting_scenario(
        [VehicleTask(start=VehicleState(0.0, 0.0, 0.0, 0.0), target_x=5.0, target_y=0.0, target_theta=0.0)]
    )
    res = generate_trajectory(sc, CFG, NoiseConfig.disabled(), KIN, steps=60, trajectory_id=7)
    assert len(res.samples) == 60
    assert res.success
    assert all(s.trajectory_id == 7 for s in res.samples)
    assert [s.timestep for s in res.samples] == list(range(60))
    for s in res.samples:
        for u in s.labels:
            assert abs(u.pedal) <= 1.0 and abs(u.steer) <= 0.8


def test_generate_trajectory_deterministic_without_noise():
    sc = sample_scenario(2, 0, rng_seed=21)
    a = generate_trajectory(sc, CFG, NoiseConfig.disabled(), KIN, steps=15)
    b = generate_trajectory(sc, CFG, NoiseConfig.disabled(), KIN, steps=15)
    assert a.samples == b.samples
    assert a.success == b.success


def test_generate_trajectory_noise_deterministic_under_seed():
    sc = sample_scenario(1, 0, rng_seed=22)
    a = generate_trajectory(sc, CFG, NoiseConfig(), KIN, steps=10, noise_rng=np.random.default_rng(5))
    b = generate_trajectory(sc, CFG, NoiseConfig(), KIN, steps=10, noise_rng=np.random.default_rng(5))
    assert a.samples == b.samples


def test_stuck_trajectory_is_kept_with_failure_flag():
    # a wall of overlapping obstacles between start and goal: the optimizer
    # stops short rather than pay the barrier cost
    sc = Scenario(
        vehicles=[
            VehicleTask(start=VehicleState(-8.0, 0.0, 0.0, 0.0), target_x=8.0, target_y=0.0, target_theta=0.0)
        ],
        obstacles=[Obstacle(0.0, -2.4, 2.0), Obstacle(0.0, 2.4, 2.0), Obstacle(0.0, 0.0, 2.0)],
        world_half_extent=15.0,
        seed=0,
    )
    res = generate_trajectory(sc, CFG, NoiseConfig.disabled(), KIN, steps=40)
    assert not res.success
    assert len(res.samples) == 40  # failed runs still produce data


def test_plan_shift_repeats_last_row():
    plan = HorizonPlan(np.arange(12, dtype=float).reshape(3, 2, 2))
    shifted = plan.shifted()
    assert np.array_equal(shifted.controls[0], plan.controls[1])
    assert np.array_equal(shifted.controls[-1], plan.controls[-1])
