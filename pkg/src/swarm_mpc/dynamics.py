"""Kinematic bicycle motion model shared by the label optimizer, the simulator and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

PEDAL_LIMIT = 1.0
STEER_LIMIT = 0.8  # rad

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return a - TWO_PI * math.ceil((a - math.pi) / TWO_PI)


def clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


@dataclass(frozen=True)
class VehicleState:
    """Planar pose plus longitudinal speed. Heading is stored unwrapped;
    comparisons go through :func:`wrap_angle`."""

    x: float      # east position (m)
    y: float      # north position (m)
    theta: float  # heading (rad)
    v: float      # longitudinal speed (m/s)

    def __post_init__(self) -> None:
        for name in ("x", "y", "theta", "v"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite VehicleState field {name!r}")


@dataclass(frozen=True)
class ControlInput:
    """Bounded actuation: pedal in [-1, 1], steer in [-0.8, 0.8] rad.

    The constructor rejects out-of-range values; use :meth:`clamped` when the
    caller wants saturation instead.
    """

    pedal: float  # acceleration command, dimensionless
    steer: float  # steering angle (rad)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.pedal) and abs(self.pedal) <= PEDAL_LIMIT):
            raise ValueError(f"pedal {self.pedal!r} outside [-{PEDAL_LIMIT}, {PEDAL_LIMIT}]")
        if not (math.isfinite(self.steer) and abs(self.steer) <= STEER_LIMIT):
            raise ValueError(f"steer {self.steer!r} outside [-{STEER_LIMIT}, {STEER_LIMIT}]")

    @classmethod
    def clamped(cls, pedal: float, steer: float) -> "ControlInput":
        return cls(clamp(pedal, -PEDAL_LIMIT, PEDAL_LIMIT), clamp(steer, -STEER_LIMIT, STEER_LIMIT))

    @classmethod
    def zero(cls) -> "ControlInput":
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class KinematicParams:
    """Transition coefficients. Defaults put pedal=1 saturation near 6.7 m/s
    and a full-lock turn radius around 2 m."""

    beta: float = 0.97  # velocity retention per step (dimensionless)
    gamma: float = 0.5  # steering gain (1/m)
    dt: float = 0.2     # timestep (s)

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if not self.gamma > 0.0:
            raise ValueError("gamma must be > 0")


def step(state: VehicleState, u: ControlInput, params: KinematicParams) -> VehicleState:
    """Advance one timestep.

    x' = x + v cos(theta) dt
    y' = y + v sin(theta) dt
    theta' = theta + v tan(steer) gamma dt
    v' = beta v + pedal dt
    """
    dt = params.dt
    return VehicleState(
        x=state.x + state.v * math.cos(state.theta) * dt,
        y=state.y + state.v * math.sin(state.theta) * dt,
        theta=state.theta + state.v * math.tan(u.steer) * params.gamma * dt,
        v=params.beta * state.v + u.pedal * dt,
    )


def rollout(
    state: VehicleState, controls: Sequence[ControlInput], params: KinematicParams
) -> list[VehicleState]:
    """Apply `step` once per control, returning the state after each one."""
    if len(controls) == 0:
        raise ValueError("rollout needs at least one control")
    states = []
    for u in controls:
        state = step(state, u, params)
        states.append(state)
    return states
