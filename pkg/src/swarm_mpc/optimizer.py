"""Receding-horizon penalty-cost minimisation that produces ground-truth control labels.

The objective is the sum of a goal-tracking term and two soft collision
penalties evaluated over a rolled-out control horizon.  Gradients come from
the autodiff tape; the box constraints on the controls are handled by exact
projection, so the solver is projected gradient descent with an Armijo
backtracking line search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import dynamics
from .autodiff import Tensor
from .dynamics import ControlInput, KinematicParams, VehicleState
from .scenario import LabeledSample, Obstacle, Scenario, TargetPose, goal_reached


class OptimizerError(Exception):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    horizon: int = 20            # lookahead steps H
    w_pos: float = 1.0           # position-error weight
    w_orient: float = 1.0        # heading-error weight
    w_col_obs: float = 5.0       # vehicle-obstacle penalty weight
    w_col_veh: float = 5.0       # vehicle-vehicle penalty weight
    r_mar_obs: float = 2.0       # obstacle safety margin (m)
    r_mar_veh: float = 3.0       # inter-vehicle safety margin (m)
    max_iters: int = 200
    grad_tol: float = 1e-4       # projected-gradient infinity-norm threshold
    pedal_limit: float = dynamics.PEDAL_LIMIT
    steer_limit: float = dynamics.STEER_LIMIT
    collision_cap: float = 1e6   # finite stand-in where the penalty would diverge
    min_pair_distance: float = 1e-6  # vehicle pair distance below which the cap applies
    method: str = "projected_gradient"  # or "lbfgsb" (scipy box-constrained quasi-Newton)

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("w_pos", "w_orient", "w_col_obs", "w_col_veh", "r_mar_obs", "r_mar_veh"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.method not in ("projected_gradient", "lbfgsb"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass(frozen=True)
class NoiseConfig:
    """Pose perturbation injected during data collection.  The position noise
    std shrinks linearly with remaining distance below d_ref, so trajectories
    settle as vehicles close in on their goals."""

    sigma0: float = 0.1       # position noise std far from the goal (m)
    d_ref: float = 5.0        # distance at which the std starts shrinking (m)
    theta_scale: float = 0.5  # heading noise std = theta_scale * position std

    @classmethod
    def disabled(cls) -> "NoiseConfig":
        return cls(sigma0=0.0)


@dataclass
class HorizonPlan:
    """H x N grid of controls; column 0 is pedal, column 1 is steer."""

    controls: np.ndarray  # (H, N, 2)

    def __post_init__(self) -> None:
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.controls.ndim != 3 or self.controls.shape[2] != 2:
            raise ValueError(f"plan must have shape (H, N, 2), got {self.controls.shape}")

    @classmethod
    def zeros(cls, horizon: int, n_vehicles: int) -> "HorizonPlan":
        return cls(np.zeros((horizon, n_vehicles, 2)))

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.controls.shape[1]

    def control_at(self, t: int, vehicle: int) -> ControlInput:
        pedal, steer = self.controls[t, vehicle]
        return ControlInput(float(pedal), float(steer))

    def first_step(self) -> list[ControlInput]:
        return [self.control_at(0, i) for i in range(self.n_vehicles)]

    def shifted(self) -> "HorizonPlan":
        """Drop the first step and repeat the last: the receding-horizon warm start."""
        return HorizonPlan(np.concatenate([self.controls[1:], self.controls[-1:]], axis=0))

    def within_bounds(self, config: OptimizerConfig) -> bool:
        return bool(
            np.all(np.abs(self.controls[:, :, 0]) <= config.pedal_limit)
            and np.all(np.abs(self.controls[:, :, 1]) <= config.steer_limit)
        )


def _project(controls: np.ndarray, config: OptimizerConfig) -> np.ndarray:
    out = controls.copy()
    out[:, :, 0] = np.clip(out[:, :, 0], -config.pedal_limit, config.pedal_limit)
    out[:, :, 1] = np.clip(out[:, :, 1], -config.steer_limit, config.steer_limit)
    return out


# ---------------------------------------------------------------------------
# differentiable rollout and cost terms


def _rollout_tensor(
    plan: Tensor, starts: Sequence[VehicleState], params: KinematicParams
) -> tuple[Tensor, Tensor, Tensor]:
    """Roll all vehicles through the bicycle transition; returns (H, N) grids
    of x, y and heading (speed only feeds the recurrence)."""
    x = Tensor([s.x for s in starts])
    y = Tensor([s.y for s in starts])
    th = Tensor([s.theta for s in starts])
    v = Tensor([s.v for s in starts])
    dt, beta, gdt = params.dt, params.beta, params.gamma * params.dt

    pedal_dt = ad.scale(plan[:, :, 0], dt)   # (H, N)
    tan_steer = ad.tan(plan[:, :, 1])        # (H, N)

    xs, ys, ths = [], [], []
    for t in range(plan.shape[0]):
        vdt = ad.scale(v, dt)
        x = x + vdt * ad.cos(th)
        y = y + vdt * ad.sin(th)
        th = th + ad.scale(v, gdt) * tan_steer[t]
        v = ad.scale(v, beta) + pedal_dt[t]
        xs.append(x)
        ys.append(y)
        ths.append(th)
    return ad.stack(xs), ad.stack(ys), ad.stack(ths)


def _target_cost_tensor(
    xs: Tensor, ys: Tensor, ths: Tensor, targets: Sequence[TargetPose], config: OptimizerConfig
) -> Tensor:
    tx = np.array([t.x for t in targets])
    ty = np.array([t.y for t in targets])
    tth = np.array([t.theta for t in targets])
    dist = ad.sqrt(ad.square(xs - tx) + ad.square(ys - ty))
    dth = ad.absolute(ad.wrap_to_pi(ths - tth))
    return ad.scale(ad.tsum(dist), config.w_pos) + ad.scale(ad.tsum(dth), config.w_orient)


def _barrier_tensor(distance: Tensor, margin: float, cap_mask: np.ndarray, config: OptimizerConfig) -> Tensor:
    """Sum of (1/d - 1/margin) over entries strictly inside the margin, with
    capped entries contributing the constant collision_cap instead."""
    inside = distance.data < margin
    active = inside & ~cap_mask
    active_f = active.astype(np.float64)
    # keep the reciprocal finite where the term is masked out anyway
    safe = distance * active_f + Tensor(1.0 - active_f)
    bracket = (ad.reciprocal(safe) - (1.0 / margin)) * active_f
    total = ad.tsum(bracket)
    n_capped = float(np.count_nonzero(cap_mask))
    if n_capped:
        total = total + Tensor(config.collision_cap * n_capped)
    return total


def _obstacle_cost_tensor(
    xs: Tensor, ys: Tensor, obstacles: Sequence[Obstacle], config: OptimizerConfig
) -> Tensor:
    total = Tensor(0.0)
    for ob in obstacles:
        d_center = ad.sqrt(ad.square(xs - ob.x) + ad.square(ys - ob.y))
        gap = d_center - ob.r
        cap_mask = d_center.data <= ob.r
        total = total + _barrier_tensor(gap, config.r_mar_obs, cap_mask, config)
    return ad.scale(total, config.w_col_obs)


def _vehicle_cost_tensor(xs: Tensor, ys: Tensor, config: OptimizerConfig) -> Tensor:
    n = xs.shape[1]
    total = Tensor(0.0)
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = xs[:, i] - xs[:, j]
            dy = ys[:, i] - ys[:, j]
            d = ad.sqrt(ad.square(dx) + ad.square(dy))
            cap_mask = d.data <= config.min_pair_distance
            total = total + _barrier_tensor(d, config.r_mar_veh, cap_mask, config)
    return ad.scale(total, config.w_col_veh)


def _total_cost_tensor(
    plan: Tensor,
    scenario: Scenario,
    kin: KinematicParams,
    config: OptimizerConfig,
    states: Sequence[VehicleState] | None = None,
) -> Tensor:
    starts = scenario.start_states() if states is None else list(states)
    xs, ys, ths = _rollout_tensor(plan, starts, kin)
    cost = _target_cost_tensor(xs, ys, ths, scenario.targets(), config)
    if scenario.obstacles:
        cost = cost + _obstacle_cost_tensor(xs, ys, scenario.obstacles, config)
    if scenario.n_vehicles > 1:
        cost = cost + _vehicle_cost_tensor(xs, ys, config)
    return cost


# ---------------------------------------------------------------------------
# public cost surface (plain floats in, float out)


def _states_grid_to_arrays(
    states: Sequence[Sequence[VehicleState]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.array([[s.x for s in row] for row in states])
    ys = np.array([[s.y for s in row] for row in states])
    ths = np.array([[s.theta for s in row] for row in states])
    return xs, ys, ths


def cost_target(
    states: Sequence[Sequence[VehicleState]],
    targets: Sequence[TargetPose],
    config: OptimizerConfig,
) -> float:
    """Goal-tracking cost over an (H, N) grid of states."""
    xs, ys, ths = _states_grid_to_arrays(states)
    return _target_cost_tensor(Tensor(xs), Tensor(ys), Tensor(ths), targets, config).item()


def cost_collision_obstacle(
    states: Sequence[Sequence[VehicleState]],
    obstacles: Sequence[Obstacle],
    config: OptimizerConfig,
) -> float:
    """Soft barrier against vehicle-obstacle proximity over the state grid."""
    if not obstacles:
        return 0.0
    xs, ys, _ = _states_grid_to_arrays(states)
    return _obstacle_cost_tensor(Tensor(xs), Tensor(ys), obstacles, config).item()


def cost_collision_vehicle(
    states: Sequence[Sequence[VehicleState]], config: OptimizerConfig
) -> float:
    """Soft barrier against vehicle-vehicle proximity over the state grid."""
    xs, ys, _ = _states_grid_to_arrays(states)
    if xs.shape[1] < 2:
        return 0.0
    return _vehicle_cost_tensor(Tensor(xs), Tensor(ys), config).item()


def total_cost(
    plan: HorizonPlan | np.ndarray,
    scenario: Scenario,
    kin: KinematicParams,
    config: OptimizerConfig,
    states: Sequence[VehicleState] | None = None,
) -> float:
    controls = plan.controls if isinstance(plan, HorizonPlan) else np.asarray(plan, dtype=np.float64)
    return _total_cost_tensor(Tensor(controls), scenario, kin, config, states).item()


def plan_gradient(
    plan: np.ndarray,
    scenario: Scenario,
    kin: KinematicParams,
    config: OptimizerConfig,
    states: Sequence[VehicleState] | None = None,
) -> tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to every control entry."""
    leaf = Tensor(plan, requires_grad=True)
    cost = _total_cost_tensor(leaf, scenario, kin, config, states)
    (grad,) = ad.backward(cost, [leaf])
    return cost.item(), grad


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveResult:
    plan: HorizonPlan
    costs: list[float]          # objective at every accepted iterate
    iterations: int
    converged: bool             # projected-gradient norm dropped below grad_tol
    projected_grad_norm: float
    step_size: float            # last line-search step scale (reusable as eta0)

    @property
    def cost(self) -> float:
        return self.costs[-1]


_ARMIJO = 1e-4
_ETA_FLOOR = 1e-10
_MAX_BACKTRACKS = 30
_STALL_REL = 1e-4    # accepted improvement below max(abs, rel * cost)...
_STALL_ABS = 1e-7
_STALL_PATIENCE = 2  # ...this many times in a row counts as a stall


def solve_horizon(
    scenario: Scenario,
    warm_start: HorizonPlan | None,
    config: OptimizerConfig,
    kin: KinematicParams = KinematicParams(),
    states: Sequence[VehicleState] | None = None,
    eta0: float = 1.0,
) -> SolveResult:
    """Minimise the horizon cost with projected gradient descent.

    The descent direction is the gradient divided per horizon row by the
    number of steps it still influences, which evens out the conditioning of
    early versus late controls.  Every iterate stays inside the control box;
    a step is accepted only if it decreases the objective enough (Armijo),
    so the cost sequence is non-increasing and never exceeds the warm
    start's.  Stops on convergence, max_iters, or when the line search
    stalls at the goal-distance kink where the gradient cannot vanish.
    `states` overrides the scenario start states for mid-trajectory
    re-solves.

    A solve that ends barely below the do-nothing cost is rescued with
    constant-turn restarts: the parked-with-wrong-heading configuration is a
    local minimum (any heading fix first drives the position cost up), and a
    full-lock circle is a better basin for descent to refine.
    """
    h, n = config.horizon, scenario.n_vehicles
    if warm_start is None:
        plan = np.zeros((h, n, 2))
    else:
        if warm_start.controls.shape != (h, n, 2):
            raise ValueError(f"warm start shape {warm_start.controls.shape} != {(h, n, 2)}")
        if not warm_start.within_bounds(config):
            raise ValueError("warm start violates control bounds")
        plan = warm_start.controls.copy()

    if config.method == "lbfgsb":
        return _solve_lbfgsb(plan, scenario, config, kin, states, eta0)

    result = _solve_projected(plan, scenario, config, kin, states, eta0)
    try:
        idle_cost = total_cost(np.zeros((h, n, 2)), scenario, kin, config, states)
    except ad.NonFiniteError as e:
        raise OptimizerError(f"non-finite cost at iteration 0: {e}") from e
    if result.cost >= max(1.0, 0.9 * idle_cost):
        for steer_sign in (1.0, -1.0):
            circle = np.zeros((h, n, 2))
            circle[:, :, 0] = 0.5 * config.pedal_limit
            circle[:, :, 1] = steer_sign * config.steer_limit
            rescue = _solve_projected(circle, scenario, config, kin, states, 1.0)
            if rescue.cost < result.cost:
                result = rescue
    return result


def _solve_projected(
    plan: np.ndarray,
    scenario: Scenario,
    config: OptimizerConfig,
    kin: KinematicParams,
    states: Sequence[VehicleState] | None,
    eta0: float,
) -> SolveResult:
    h = config.horizon
    influence = (h - np.arange(h, dtype=np.float64)).reshape(h, 1, 1)
    eta = eta0
    costs: list[float] = []
    ginf = math.inf
    converged = False
    iterations = 0
    stalled = 0

    for k in range(config.max_iters):
        iterations = k + 1
        try:
            cost, grad = plan_gradient(plan, scenario, kin, config, states)
        except ad.NonFiniteError as e:
            raise OptimizerError(f"non-finite cost at iteration {k}: {e}") from e
        if not costs:
            costs.append(cost)

        ginf = float(np.max(np.abs(plan - _project(plan - grad, config))))
        if ginf < config.grad_tol:
            converged = True
            break

        direction = grad / influence
        accepted = False
        backtracks = 0
        while eta >= _ETA_FLOOR and backtracks < _MAX_BACKTRACKS:
            candidate = _project(plan - eta * direction, config)
            step = candidate - plan
            step_sq = float(np.sum(step * step))
            if step_sq == 0.0:
                break
            try:
                cand_cost = total_cost(candidate, scenario, kin, config, states)
            except ad.NonFiniteError as e:
                raise OptimizerError(f"non-finite cost at iteration {k}: {e}") from e
            if cand_cost <= cost - _ARMIJO / eta * step_sq:
                plan = candidate
                costs.append(cand_cost)
                if backtracks == 0:
                    eta = min(eta * 2.0, 64.0)
                accepted = True
                break
            eta *= 0.5
            backtracks += 1
        if not accepted:
            break  # no admissible descent step left
        threshold = max(_STALL_ABS, _STALL_REL * abs(costs[-2]))
        stalled = stalled + 1 if costs[-2] - costs[-1] <= threshold else 0
        if stalled >= _STALL_PATIENCE:
            break  # progress is below resolution at a non-smooth minimum

    if not costs:
        try:
            costs.append(total_cost(plan, scenario, kin, config, states))
        except ad.NonFiniteError as e:
            raise OptimizerError(f"non-finite cost at iteration 0: {e}") from e
    return SolveResult(
        plan=HorizonPlan(plan),
        costs=costs,
        iterations=iterations,
        converged=converged,
        projected_grad_norm=ginf,
        step_size=eta,
    )


def _solve_lbfgsb(
    plan: np.ndarray,
    scenario: Scenario,
    config: OptimizerConfig,
    kin: KinematicParams,
    states: Sequence[VehicleState] | None,
    eta0: float,
) -> SolveResult:
    """Box-constrained quasi-Newton alternative; gradients still come from the
    autodiff tape.  Falls back on the plan unchanged if no step decreases the
    cost."""
    from scipy.optimize import minimize

    shape = plan.shape
    costs: list[float] = []

    def objective(flat: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            cost, grad = plan_gradient(flat.reshape(shape), scenario, kin, config, states)
        except ad.NonFiniteError as e:
            raise OptimizerError(f"non-finite cost in lbfgsb solve: {e}") from e
        return cost, grad.reshape(-1)

    def track(flat: np.ndarray) -> None:
        costs.append(total_cost(flat.reshape(shape), scenario, kin, config, states))

    bounds = [(-config.pedal_limit, config.pedal_limit), (-config.steer_limit, config.steer_limit)] * (
        shape[0] * shape[1]
    )
    start_cost = total_cost(plan, scenario, kin, config, states)
    res = minimize(
        objective,
        plan.reshape(-1),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=track,
        options={"maxiter": config.max_iters, "gtol": config.grad_tol, "ftol": 1e-10},
    )
    final = _project(res.x.reshape(shape), config)
    final_cost = total_cost(final, scenario, kin, config, states)
    if final_cost > start_cost:  # safeguard: never return worse than the warm start
        final, final_cost = plan, start_cost
    _, final_grad = plan_gradient(final, scenario, kin, config, states)
    ginf = float(np.max(np.abs(final - _project(final - final_grad, config))))
    return SolveResult(
        plan=HorizonPlan(final),
        costs=[start_cost] + costs + [final_cost],
        iterations=int(res.nit),
        converged=bool(res.success),
        projected_grad_norm=ginf,
        step_size=eta0,
    )


# ---------------------------------------------------------------------------
# closed-loop data collection


@dataclass
class TrajectoryResult:
    samples: list[LabeledSample]
    success: bool                  # all vehicles touched their goal tolerance
    reached: list[bool]


def generate_trajectory(
    scenario: Scenario,
    config: OptimizerConfig = OptimizerConfig(),
    noise: NoiseConfig = NoiseConfig(),
    kin: KinematicParams = KinematicParams(),
    steps: int = 120,
    trajectory_id: int = 0,
    noise_rng: np.random.Generator | None = None,
) -> TrajectoryResult:
    """Closed-loop label collection: re-solve, record the first-step controls,
    execute them, then jitter each pose.  Failed (stuck) runs are kept."""
    targets = scenario.targets()
    states = scenario.start_states()
    reached = [goal_reached(s, t) for s, t in zip(states, targets)]
    if noise.sigma0 > 0.0 and noise_rng is None:
        noise_rng = np.random.default_rng(0)

    plan: HorizonPlan | None = None
    eta = 1.0
    samples: list[LabeledSample] = []
    for t in range(steps):
        try:
            result = solve_horizon(scenario, plan, config, kin, states=states, eta0=eta)
        except OptimizerError as e:
            raise OptimizerError(f"trajectory {trajectory_id}, step {t}: {e}") from e
        eta = result.step_size
        labels = result.plan.first_step()
        samples.append(
            LabeledSample(
                trajectory_id=trajectory_id,
                timestep=t,
                states=list(states),
                targets=list(targets),
                obstacles=list(scenario.obstacles),
                labels=labels,
            )
        )
        states = [dynamics.step(s, u, kin) for s, u in zip(states, labels)]

        if noise.sigma0 > 0.0:
            noisy = []
            for s, tgt in zip(states, targets):
                d = math.hypot(s.x - tgt.x, s.y - tgt.y)
                sigma_p = noise.sigma0 * min(1.0, d / noise.d_ref)
                dx, dy, dth = noise_rng.normal(0.0, 1.0, size=3)
                noisy.append(
                    VehicleState(
                        x=s.x + sigma_p * dx,
                        y=s.y + sigma_p * dy,
                        theta=s.theta + sigma_p * noise.theta_scale * dth,
                        v=s.v,
                    )
                )
            states = noisy

        for i, (s, tgt) in enumerate(zip(states, targets)):
            if not reached[i] and goal_reached(s, tgt):
                reached[i] = True
        plan = result.plan.shifted()

    return TrajectoryResult(samples=samples, success=all(reached), reached=reached)
