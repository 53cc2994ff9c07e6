"""World instances: tasks, obstacles, random sampling, JSONL persistence, dataset splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dynamics import ControlInput, VehicleState, wrap_angle

FORMAT_VERSION = 1

# goal tolerances used by the success metric, the data generator and the CLI
DEFAULT_POSITION_TOLERANCE = 1.25  # m
DEFAULT_HEADING_TOLERANCE = 0.2    # rad


class ScenarioError(Exception):
    pass


class SamplingError(ScenarioError):
    """Rejection sampling gave up; the requested configuration is over-crowded."""


class FormatError(ScenarioError):
    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Obstacle:
    x: float  # center east (m)
    y: float  # center north (m)
    r: float  # radius (m)

    def __post_init__(self) -> None:
        if not self.r > 0.0:
            raise ValueError("obstacle radius must be > 0")


@dataclass(frozen=True)
class TargetPose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class VehicleTask:
    """Start state plus goal pose; vehicles spawn at rest."""

    start: VehicleState
    target_x: float
    target_y: float
    target_theta: float

    def __post_init__(self) -> None:
        if self.start.v != 0.0:
            raise ValueError("vehicles spawn at rest (start.v must be 0)")

    @property
    def target(self) -> TargetPose:
        return TargetPose(self.target_x, self.target_y, self.target_theta)


@dataclass(frozen=True)
class ScenarioConfig:
    world_half_extent: float = 15.0  # positions sampled in +-this box (m)
    r_mar_veh: float = 3.0           # min start/target separation between vehicles (m)
    r_mar_obs: float = 2.0           # min clearance beyond obstacle radius (m)
    obstacle_radius_min: float = 1.0
    obstacle_radius_max: float = 3.0
    max_attempts: int = 10_000       # candidate draws before giving up


@dataclass
class Scenario:
    vehicles: list[VehicleTask]
    obstacles: list[Obstacle]
    world_half_extent: float
    seed: int

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    def start_states(self) -> list[VehicleState]:
        return [t.start for t in self.vehicles]

    def targets(self) -> list[TargetPose]:
        return [t.target for t in self.vehicles]


@dataclass
class LabeledSample:
    """One graph snapshot with per-vehicle first-step control labels."""

    trajectory_id: int
    timestep: int
    states: list[VehicleState]
    targets: list[TargetPose]
    obstacles: list[Obstacle]
    labels: list[ControlInput]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.states) or len(self.targets) != len(self.states):
            raise ValueError("labels/targets must match vehicle count")


def goal_reached(
    state: VehicleState,
    target: TargetPose,
    pos_tol: float = DEFAULT_POSITION_TOLERANCE,
    angle_tol: float = DEFAULT_HEADING_TOLERANCE,
) -> bool:
    """Pose-only goal predicate: within pos_tol metres and angle_tol radians."""
    if math.hypot(state.x - target.x, state.y - target.y) > pos_tol:
        return False
    return abs(wrap_angle(state.theta - target.theta)) <= angle_tol


# ---------------------------------------------------------------------------
# sampling


def _clear_of_obstacles(x: float, y: float, obstacles: Sequence[Obstacle], margin: float) -> bool:
    return all(math.hypot(x - ob.x, y - ob.y) >= ob.r + margin for ob in obstacles)


def _clear_of_points(x: float, y: float, points: Sequence[tuple[float, float]], sep: float) -> bool:
    return all(math.hypot(x - px, y - py) >= sep for px, py in points)


def sample_scenario(
    n_vehicles: int,
    n_obstacles: int,
    rng_seed: int,
    config: ScenarioConfig = ScenarioConfig(),
) -> Scenario:
    """Rejection-sample a scenario satisfying the non-overlap constraints.

    Positions are uniform in the world box, headings uniform in (-pi, pi],
    obstacle radii uniform in [radius_min, radius_max].  Raises SamplingError
    after config.max_attempts candidate draws.
    """
    if n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be >= 0")
    rng = np.random.default_rng(rng_seed)
    whe = config.world_half_extent
    attempts = 0

    def budget() -> None:
        nonlocal attempts
        attempts += 1
        if attempts > config.max_attempts:
            raise SamplingError(
                f"gave up after {config.max_attempts} draws "
                f"({n_vehicles} vehicles, {n_obstacles} obstacles, half extent {whe})"
            )

    obstacles: list[Obstacle] = []
    for _ in range(n_obstacles):
        budget()
        obstacles.append(
            Obstacle(
                x=float(rng.uniform(-whe, whe)),
                y=float(rng.uniform(-whe, whe)),
                r=float(rng.uniform(config.obstacle_radius_min, config.obstacle_radius_max)),
            )
        )

    def draw_poses() -> list[tuple[float, float, float]]:
        placed: list[tuple[float, float]] = []
        poses: list[tuple[float, float, float]] = []
        while len(poses) < n_vehicles:
            budget()
            x = float(rng.uniform(-whe, whe))
            y = float(rng.uniform(-whe, whe))
            theta = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
            if not _clear_of_points(x, y, placed, config.r_mar_veh):
                continue
            if not _clear_of_obstacles(x, y, obstacles, config.r_mar_obs):
                continue
            placed.append((x, y))
            poses.append((x, y, theta))
        return poses

    starts = draw_poses()
    goals = draw_poses()
    vehicles = [
        VehicleTask(
            start=VehicleState(x=sx, y=sy, theta=st, v=0.0),
            target_x=gx,
            target_y=gy,
            target_theta=gt,
        )
        for (sx, sy, st), (gx, gy, gt) in zip(starts, goals)
    ]
    return Scenario(vehicles=vehicles, obstacles=obstacles, world_half_extent=whe, seed=rng_seed)


# ---------------------------------------------------------------------------
# persistence: line-delimited JSON, one header line then one record per line.
# Floats round-trip exactly through repr/float.


def _vehicle_record(t: VehicleTask) -> dict:
    return {
        "x": t.start.x,
        "y": t.start.y,
        "theta": t.start.theta,
        "v": t.start.v,
        "tx": t.target_x,
        "ty": t.target_y,
        "ttheta": t.target_theta,
    }


def _obstacle_record(ob: Obstacle) -> dict:
    return {"x": ob.x, "y": ob.y, "r": ob.r}


def _parse_obstacle(rec: dict) -> Obstacle:
    return Obstacle(x=float(rec["x"]), y=float(rec["y"]), r=float(rec["r"]))


def _header_line(kind: str) -> str:
    return json.dumps({"version": FORMAT_VERSION, "kind": kind})


def _read_records(path: str, kind: str) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(path, 1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(path, 1, f"bad header: {e.msg}") from e
    if not isinstance(header, dict) or header.get("kind") != kind:
        raise FormatError(path, 1, f"expected {kind!r} header")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(path, 1, f"unsupported format version {header.get('version')!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(path, lineno, f"bad record: {e.msg}") from e
        if not isinstance(rec, dict):
            raise FormatError(path, lineno, "record is not an object")
        yield lineno, rec


def save_scenarios(scenarios: Sequence[Scenario], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line("scenarios") + "\n")
        for sc in scenarios:
            rec = {
                "version": FORMAT_VERSION,
                "seed": sc.seed,
                "world_half_extent": sc.world_half_extent,
                "vehicles": [_vehicle_record(t) for t in sc.vehicles],
                "obstacles": [_obstacle_record(ob) for ob in sc.obstacles],
            }
            fh.write(json.dumps(rec) + "\n")


def load_scenarios(path: str) -> list[Scenario]:
    out: list[Scenario] = []
    for lineno, rec in _read_records(path, "scenarios"):
        try:
            vehicles = [
                VehicleTask(
                    start=VehicleState(
                        x=float(v["x"]), y=float(v["y"]), theta=float(v["theta"]), v=float(v["v"])
                    ),
                    target_x=float(v["tx"]),
                    target_y=float(v["ty"]),
                    target_theta=float(v["ttheta"]),
                )
                for v in rec["vehicles"]
            ]
            out.append(
                Scenario(
                    vehicles=vehicles,
                    obstacles=[_parse_obstacle(o) for o in rec["obstacles"]],
                    world_half_extent=float(rec["world_half_extent"]),
                    seed=int(rec["seed"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(path, lineno, f"bad scenario record: {e}") from e
    return out


def save_dataset(samples: Sequence[LabeledSample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header_line("dataset") + "\n")
        for s in samples:
            rec = {
                "version": FORMAT_VERSION,
                "trajectory_id": s.trajectory_id,
                "timestep": s.timestep,
                "states": [
                    {"x": st.x, "y": st.y, "theta": st.theta, "v": st.v} for st in s.states
                ],
                "targets": [{"x": t.x, "y": t.y, "theta": t.theta} for t in s.targets],
                "obstacles": [_obstacle_record(ob) for ob in s.obstacles],
                "labels": [{"pedal": u.pedal, "steer": u.steer} for u in s.labels],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str) -> list[LabeledSample]:
    out: list[LabeledSample] = []
    for lineno, rec in _read_records(path, "dataset"):
        try:
            out.append(
                LabeledSample(
                    trajectory_id=int(rec["trajectory_id"]),
                    timestep=int(rec["timestep"]),
                    states=[
                        VehicleState(
                            x=float(s["x"]), y=float(s["y"]), theta=float(s["theta"]), v=float(s["v"])
                        )
                        for s in rec["states"]
                    ],
                    targets=[
                        TargetPose(x=float(t["x"]), y=float(t["y"]), theta=float(t["theta"]))
                        for t in rec["targets"]
                    ],
                    obstacles=[_parse_obstacle(o) for o in rec["obstacles"]],
                    labels=[
                        ControlInput(pedal=float(u["pedal"]), steer=float(u["steer"]))
                        for u in rec["labels"]
                    ],
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(path, lineno, f"bad sample record: {e}") from e
    return out


# ---------------------------------------------------------------------------
# train/validation split


def split_dataset(
    samples: Sequence[LabeledSample], ratio: float, seed: int
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Trajectory-level split: all samples of a trajectory land on one side.

    This avoids leakage between near-identical consecutive snapshots.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    traj_ids = sorted({s.trajectory_id for s in samples})
    if len(traj_ids) < 2:
        raise ScenarioError("need at least 2 trajectories to split")
    rng = np.random.default_rng(seed)
    order = [traj_ids[i] for i in rng.permutation(len(traj_ids))]
    n_train = int(round(ratio * len(traj_ids)))
    n_train = max(1, min(len(traj_ids) - 1, n_train))
    train_ids = set(order[:n_train])
    train = [s for s in samples if s.trajectory_id in train_ids]
    val = [s for s in samples if s.trajectory_id not in train_ids]
    return train, val
