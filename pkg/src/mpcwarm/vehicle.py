"""Kinematic bicycle model and control-sequence rollouts.

The model is a planar single-track vehicle: position, yaw and speed,
driven by acceleration and steering inputs through an explicit Euler
update.  All four state components advance simultaneously from the
pre-step state.  Tire friction is deliberately not modeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trackgeom import wrap_angle


@dataclass(frozen=True)
class VehicleSpec:
    wheelbase: float = 2.89
    dt: float = 0.02
    accel_min: float = -5.0
    accel_max: float = 5.0
    steer_min: float = -0.52
    steer_max: float = 0.52

    def __post_init__(self):
        if not self.wheelbase > 0.0:
            raise ValueError("wheelbase must be positive")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not self.accel_min < self.accel_max:
            raise ValueError("accel bounds must satisfy min < max")
        if not self.steer_min < self.steer_max:
            raise ValueError("steer bounds must satisfy min < max")

    def bounds_array(self, horizon: int) -> np.ndarray:
        """Per-dimension (min, max) for an interleaved (accel, steer) vector."""
        row = np.array([[self.accel_min, self.accel_max],
                        [self.steer_min, self.steer_max]])
        return np.tile(row, (horizon, 1))


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    v: float

    def __post_init__(self):
        for name in ("x", "y", "yaw", "v"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"state component {name} must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steer: float


@dataclass(frozen=True)
class ControlSequence:
    inputs: tuple[ControlInput, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i) -> ControlInput:
        return self.inputs[i]

    def as_array(self) -> np.ndarray:
        """(H, 2) array of (accel, steer) rows."""
        return np.array([[u.accel, u.steer] for u in self.inputs], dtype=float)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ControlSequence":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("control array must have shape (H, 2)")
        return cls(tuple(ControlInput(float(a), float(s)) for a, s in arr))


_BOUND_TOL = 1e-9


def check_input(u: ControlInput, spec: VehicleSpec) -> None:
    if not (spec.accel_min - _BOUND_TOL <= u.accel <= spec.accel_max + _BOUND_TOL):
        raise ValueError(f"accel {u.accel} outside [{spec.accel_min}, {spec.accel_max}]")
    if not (spec.steer_min - _BOUND_TOL <= u.steer <= spec.steer_max + _BOUND_TOL):
        raise ValueError(f"steer {u.steer} outside [{spec.steer_min}, {spec.steer_max}]")


def step(state: VehicleState, u: ControlInput, spec: VehicleSpec) -> VehicleState:
    """One explicit Euler step of the bicycle model."""
    check_input(u, spec)
    dt = spec.dt
    return VehicleState(
        x=state.x + state.v * math.cos(state.yaw) * dt,
        y=state.y + state.v * math.sin(state.yaw) * dt,
        yaw=wrap_angle(state.yaw + state.v / spec.wheelbase * math.tan(u.steer) * dt),
        v=state.v + u.accel * dt,
    )


def rollout(state: VehicleState, seq: ControlSequence,
            spec: VehicleSpec) -> list[VehicleState]:
    """Closed-form fold of step over the sequence; returns H+1 states."""
    traj = [state]
    for u in seq.inputs:
        traj.append(step(traj[-1], u, spec))
    return traj


def rollout_array(x: float, y: float, yaw: float, v: float,
                  controls: np.ndarray, spec: VehicleSpec) -> np.ndarray:
    """Fast unchecked rollout over an (H, 2) control array.

    Returns an (H+1, 4) array of [x, y, yaw, v] rows with raw (unwrapped)
    yaw.  This is the hot path inside the MPC objective; input bounds are
    the solver's responsibility here.
    """
    h = controls.shape[0]
    out = np.empty((h + 1, 4))
    out[0] = (x, y, yaw, v)
    dt = spec.dt
    inv_l = dt / spec.wheelbase
    for k in range(h):
        a = controls[k, 0]
        s = controls[k, 1]
        out[k + 1, 0] = x = x + v * math.cos(yaw) * dt
        out[k + 1, 1] = y = y + v * math.sin(yaw) * dt
        yaw = yaw + v * math.tan(s) * inv_l
        out[k + 1, 2] = yaw
        out[k + 1, 3] = v = v + a * dt
    return out
