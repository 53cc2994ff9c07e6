"""Closed-loop rollouts of a trained policy and the three headline metrics:
success-to-goal rate, collision rate per metre, and step efficiency against
the sequential (vehicle-edges-removed) lower bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dynamics
from .dynamics import ControlInput, KinematicParams, VehicleState
from .model import GraphInstance, PolicyOutput, build_graph
from .scenario import (
    DEFAULT_HEADING_TOLERANCE,
    DEFAULT_POSITION_TOLERANCE,
    Obstacle,
    Scenario,
    TargetPose,
    goal_reached,
)

Policy = Callable[[GraphInstance], PolicyOutput]


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    max_steps: int = 240
    pos_tol: float = DEFAULT_POSITION_TOLERANCE
    angle_tol: float = DEFAULT_HEADING_TOLERANCE
    d_coll_veh: float = 2.0  # vehicle-vehicle contact distance (m)
    d_coll_obs: float = 1.0  # clearance beyond obstacle radius that counts as contact (m)


@dataclass(frozen=True)
class CollisionEvent:
    """One contiguous contact interval between a pair of entities."""

    step: int       # first step of the contact interval
    kind: str       # "veh-veh" or "veh-obs"
    a: int          # vehicle index
    b: int          # other vehicle index, or obstacle index for veh-obs


@dataclass
class EpisodeResult:
    n_vehicles: int
    reached: list[bool]
    steps_to_reach: list[int | None]
    distances: list[float]             # per-vehicle path length over the episode (m)
    collisions: list[CollisionEvent]
    total_steps: int
    states: list[list[VehicleState]]   # trace: states[t][i], t = 0..total_steps
    controls: list[list[ControlInput]]
    attention: list[np.ndarray] | None = None  # per executed step: (blocks, N, N), NaN off-edge

    def collided_vehicles(self) -> set[int]:
        hit: set[int] = set()
        for ev in self.collisions:
            hit.add(ev.a)
            if ev.kind == "veh-veh":
                hit.add(ev.b)
        return hit

    def vehicle_successes(self) -> list[bool]:
        """Reached the goal tolerance and never took part in a collision."""
        hit = self.collided_vehicles()
        return [self.reached[i] and i not in hit for i in range(self.n_vehicles)]


def detect_collisions(
    states: Sequence[Sequence[VehicleState]],
    obstacles: Sequence[Obstacle],
    config: EvalConfig = EvalConfig(),
) -> list[CollisionEvent]:
    """Disc-overlap contacts; an unbroken overlap counts once per pair."""
    events: list[CollisionEvent] = []
    active: set[tuple[str, int, int]] = set()
    n = len(states[0]) if states else 0
    for t, row in enumerate(states):
        current: set[tuple[str, int, int]] = set()
        for i in range(n - 1):
            for j in range(i + 1, n):
                if math.hypot(row[i].x - row[j].x, row[i].y - row[j].y) < config.d_coll_veh:
                    current.add(("veh-veh", i, j))
        for i in range(n):
            for k, ob in enumerate(obstacles):
                if math.hypot(row[i].x - ob.x, row[i].y - ob.y) < ob.r + config.d_coll_obs:
                    current.add(("veh-obs", i, k))
        for key in sorted(current - active):
            kind, a, b = key
            events.append(CollisionEvent(step=t, kind=kind, a=a, b=b))
        active = current
    events.sort(key=lambda ev: (ev.step, ev.kind, ev.a, ev.b))
    return events


def _attention_matrix(out: PolicyOutput, graph: GraphInstance) -> np.ndarray | None:
    """Raw per-block scores mapped onto (blocks, N, N); absent entries NaN."""
    if out.attention is None:
        return None
    n = graph.n_nodes
    mats = np.full((out.attention.shape[0], n, n), np.nan)
    for i in range(graph.n_vehicles):
        for col, j in enumerate(graph.neighbors[i]):
            mats[:, i, j] = out.attention[:, i, col]
    return mats


def rollout_episode(
    scenario: Scenario,
    policy: Policy,
    kin: KinematicParams = KinematicParams(),
    config: EvalConfig = EvalConfig(),
    vehicle_edges: bool = True,
    record_attention: bool = False,
) -> EpisodeResult:
    """Drive all vehicles simultaneously until every one has touched its goal
    tolerance or max_steps runs out.  Collisions never end the episode; they
    are detected afterwards over the whole trace."""
    targets = scenario.targets()
    states = list(scenario.start_states())
    n = len(states)
    reached_at: list[int | None] = [
        0 if goal_reached(s, t, config.pos_tol, config.angle_tol) else None
        for s, t in zip(states, targets)
    ]
    trace = [list(states)]
    controls_trace: list[list[ControlInput]] = []
    attention: list[np.ndarray] | None = [] if record_attention else None

    steps = 0
    while steps < config.max_steps and any(r is None for r in reached_at):
        graph = build_graph(states, targets, scenario.obstacles, vehicle_edges=vehicle_edges)
        out = policy(graph)
        controls = [ControlInput.clamped(float(p), float(s)) for p, s in out.controls]
        states = [dynamics.step(s, u, kin) for s, u in zip(states, controls)]
        steps += 1
        for i, s in enumerate(states):
            if not (math.isfinite(s.x) and math.isfinite(s.y) and math.isfinite(s.theta) and math.isfinite(s.v)):
                raise EvaluationError(f"non-finite state for vehicle {i} at step {steps}")
            if reached_at[i] is None and goal_reached(s, targets[i], config.pos_tol, config.angle_tol):
                reached_at[i] = steps
        trace.append(list(states))
        controls_trace.append(controls)
        if attention is not None:
            attention.append(_attention_matrix(out, graph))

    distances = [
        sum(
            math.hypot(trace[t + 1][i].x - trace[t][i].x, trace[t + 1][i].y - trace[t][i].y)
            for t in range(steps)
        )
        for i in range(n)
    ]
    return EpisodeResult(
        n_vehicles=n,
        reached=[r is not None for r in reached_at],
        steps_to_reach=reached_at,
        distances=distances,
        collisions=detect_collisions(trace, scenario.obstacles, config),
        total_steps=steps,
        states=trace,
        controls=controls_trace,
        attention=attention,
    )


# ---------------------------------------------------------------------------
# metrics


def success_to_goal_rate(episodes: Sequence[EpisodeResult]) -> float:
    """Fraction of vehicles that reached tolerance without any collision."""
    total = sum(ep.n_vehicles for ep in episodes)
    if total == 0:
        raise EvaluationError("no vehicles to score")
    good = sum(sum(ep.vehicle_successes()) for ep in episodes)
    return good / total


def collision_rate(episodes: Sequence[EpisodeResult]) -> float | None:
    """Collision events per metre travelled; None when nothing moved."""
    events = sum(len(ep.collisions) for ep in episodes)
    distance = sum(sum(ep.distances) for ep in episodes)
    if distance == 0.0:
        return None
    return events / distance


def step_efficiency(
    scenario: Scenario,
    policy: Policy,
    kin: KinematicParams = KinematicParams(),
    config: EvalConfig = EvalConfig(),
    joint: EpisodeResult | None = None,
) -> float | None:
    """Sequential-lower-bound steps over joint steps.

    The lower bound runs the same policy with vehicle-to-vehicle edges
    removed (each vehicle plans as if alone among the obstacles) and sums the
    per-vehicle steps to reach.  Absent when either rollout leaves a vehicle
    short of its goal, or the joint rollout takes zero steps.  Pass `joint`
    to reuse an already-computed full rollout.
    """
    if joint is None:
        joint = rollout_episode(scenario, policy, kin, config, vehicle_edges=True)
    if not all(joint.reached) or joint.total_steps == 0:
        return None
    solo = rollout_episode(scenario, policy, kin, config, vehicle_edges=False)
    if not all(solo.reached):
        return None
    numerator = sum(s for s in solo.steps_to_reach if s is not None)
    return numerator / joint.total_steps


def attention_trace(episode: EpisodeResult) -> list[np.ndarray]:
    """Per executed step, the (N, N) mean over blocks of the raw attention
    scores; entries without an edge stay NaN."""
    if episode.attention is None or any(m is None for m in episode.attention):
        raise EvaluationError("no attention available for this episode")
    return [np.mean(mats, axis=0) for mats in episode.attention]


@dataclass
class GroupMetrics:
    n_vehicles: int
    n_obstacles: int
    episodes: int
    success_rate: float
    collision_rate: float | None
    step_efficiency: float | None


@dataclass
class MetricsReport:
    groups: list[GroupMetrics] = field(default_factory=list)


def aggregate_metrics(
    episodes: Sequence[EpisodeResult],
    scenarios: Sequence[Scenario],
    efficiencies: Sequence[float | None],
) -> MetricsReport:
    """Group per-(vehicles, obstacles) like the headline result tables.

    The collision rate is reported absent for the one-vehicle/no-obstacle
    group, where no collision is possible.
    """
    if not (len(episodes) == len(scenarios) == len(efficiencies)):
        raise EvaluationError("episodes/scenarios/efficiencies length mismatch")
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, sc in enumerate(scenarios):
        buckets.setdefault((sc.n_vehicles, sc.n_obstacles), []).append(i)

    report = MetricsReport()
    for (nv, no), idxs in sorted(buckets.items()):
        eps = [episodes[i] for i in idxs]
        effs = [efficiencies[i] for i in idxs if efficiencies[i] is not None]
        rate = None if (nv, no) == (1, 0) else collision_rate(eps)
        report.groups.append(
            GroupMetrics(
                n_vehicles=nv,
                n_obstacles=no,
                episodes=len(eps),
                success_rate=success_to_goal_rate(eps),
                collision_rate=rate,
                step_efficiency=(sum(effs) / len(effs)) if effs else None,
            )
        )
    return report


def write_metrics_csv(report: MetricsReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("n_vehicles,n_obstacles,episodes,success_rate,collision_rate,step_efficiency\n")
        for g in report.groups:
            cr = "-" if g.collision_rate is None else repr(g.collision_rate)
            se = "-" if g.step_efficiency is None else repr(g.step_efficiency)
            fh.write(f"{g.n_vehicles},{g.n_obstacles},{g.episodes},{g.success_rate!r},{cr},{se}\n")
