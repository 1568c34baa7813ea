"""Receding-horizon controller over the bicycle model.

Builds the finite-horizon tracking cost (cross-track error, heading
error, speed error and input-rate smoothness over H steps), hands it to
the derivative-free solver with a chosen warm-start source, and applies
the accumulated-planned-xte early-stop criterion.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dfo, trackgeom
from .trackgeom import Track
from .vehicle import (ControlInput, ControlSequence, VehicleSpec,
                      VehicleState, rollout_array)


class WarmStartSource(enum.Enum):
    ZEROS = "zeros"
    PREVIOUS_SHIFTED = "previous_shifted"
    POLICY = "policy"


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 25
    weights: tuple = (2000.0, 100.0, 60.0, 2.0, 20.0)
    v_ref: float = 10.0
    max_iterations: int = 50
    early_stop_threshold: Optional[float] = 0.1  # meters; None disables
    vehicle: VehicleSpec = field(default_factory=VehicleSpec)
    xte_mode: str = "waypoint"
    rho_begin: float = 0.5
    rho_end: float = 1e-4

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(self.weights) != 5 or any(w < 0 for w in self.weights):
            raise ValueError("need 5 non-negative cost weights")
        if not np.isfinite(self.v_ref):
            raise ValueError("v_ref must be finite")
        if self.early_stop_threshold is not None and not self.early_stop_threshold > 0:
            raise ValueError("early_stop_threshold must be positive when enabled")


@dataclass
class MpcSolution:
    sequence: ControlSequence
    iterations_used: int
    final_cost: float
    early_stopped: bool
    planned_xte_sum: float
    solve_time: float


def expert_config(**overrides) -> MpcConfig:
    """Demonstration-collection profile: big budget, no early stop."""
    base = dict(max_iterations=300, early_stop_threshold=None)
    base.update(overrides)
    return MpcConfig(**base)


def realtime_config(**overrides) -> MpcConfig:
    """Online profile: 50-evaluation cap with the 0.1 m early stop."""
    base = dict(max_iterations=50, early_stop_threshold=0.1)
    base.update(overrides)
    return MpcConfig(**base)


_ZERO_INPUT = ControlInput(0.0, 0.0)


def _controls_cost(track: Track, state: VehicleState, controls: np.ndarray,
                   config: MpcConfig, prev_input: ControlInput,
                   window_idx=None) -> float:
    """Cost of an (H, 2) control array from `state` (hot path)."""
    w0, w1, w2, w3, w4 = config.weights
    traj = rollout_array(state.x, state.y, state.yaw, state.v, controls,
                         config.vehicle)
    head = traj[:-1]  # states paired with each input
    xte, eth, _ = trackgeom.tracking_errors(
        track, head[:, 0], head[:, 1], head[:, 2], mode=config.xte_mode,
        window_idx=window_idx)
    v_err = head[:, 3] - config.v_ref
    accel = controls[:, 0]
    steer = controls[:, 1]
    d_steer = np.diff(steer, prepend=prev_input.steer)
    d_accel = np.diff(accel, prepend=prev_input.accel)
    return float(w0 * np.dot(xte, xte) + w1 * np.dot(eth, eth)
                 + w2 * np.dot(v_err, v_err)
                 + w3 * np.dot(d_steer, d_steer)
                 + w4 * np.dot(d_accel, d_accel))


def _controls_xte_sum(track: Track, state: VehicleState, controls: np.ndarray,
                      config: MpcConfig, window_idx=None) -> float:
    """Accumulated xte over the H states the plan rolls out to."""
    traj = rollout_array(state.x, state.y, state.yaw, state.v, controls,
                         config.vehicle)
    tail = traj[1:]
    xte, _, _ = trackgeom.tracking_errors(
        track, tail[:, 0], tail[:, 1], tail[:, 2], mode=config.xte_mode,
        window_idx=window_idx)
    return float(np.sum(xte))


def mpc_cost(track: Track, state: VehicleState, seq: ControlSequence,
             config: MpcConfig, prev_input: ControlInput = _ZERO_INPUT) -> float:
    """Five-term tracking cost of a candidate control sequence.

    The first-step smoothness terms are anchored to `prev_input`, the
    input actually applied at the previous control step (zero at episode
    start).
    """
    if len(seq) != config.horizon:
        raise ValueError(f"sequence length {len(seq)} != horizon {config.horizon}")
    return _controls_cost(track, state, seq.as_array(), config, prev_input)


def planned_xte_sum(track: Track, state: VehicleState, seq: ControlSequence,
                    config: MpcConfig) -> float:
    """Sum of cross-track errors over the rolled-out plan states."""
    if len(seq) != config.horizon:
        raise ValueError(f"sequence length {len(seq)} != horizon {config.horizon}")
    return _controls_xte_sum(track, state, seq.as_array(), config)


def shift_previous(previous: MpcSolution) -> ControlSequence:
    """Shift a previous solution one step: drop the head, repeat the tail."""
    inputs = previous.sequence.inputs
    return ControlSequence(inputs[1:] + (inputs[-1],))


def _initial_guess(config: MpcConfig, warm_start: WarmStartSource,
                   policy_guess: Optional[ControlSequence],
                   previous: Optional[MpcSolution]) -> np.ndarray:
    if warm_start is WarmStartSource.ZEROS:
        return np.zeros((config.horizon, 2))
    if warm_start is WarmStartSource.PREVIOUS_SHIFTED:
        if previous is None:
            raise ValueError("previous_shifted warm start needs a previous solution")
        return shift_previous(previous).as_array()
    if warm_start is WarmStartSource.POLICY:
        if policy_guess is None:
            raise ValueError("policy warm start needs a policy guess")
        if len(policy_guess) != config.horizon:
            raise ValueError("policy guess length != horizon")
        return policy_guess.as_array()
    raise ValueError(f"unknown warm start source: {warm_start!r}")


def solve(track: Track, state: VehicleState, config: MpcConfig,
          warm_start: WarmStartSource,
          policy_guess: Optional[ControlSequence] = None,
          previous: Optional[MpcSolution] = None,
          prev_input: ControlInput = _ZERO_INPUT) -> MpcSolution:
    """Solve the receding-horizon problem from the chosen warm start."""
    h = config.horizon
    spec = config.vehicle
    bounds = spec.bounds_array(h)
    guess = _initial_guess(config, warm_start, policy_guess, previous)
    guess = np.clip(guess, bounds[:, 0].reshape(h, 2), bounds[:, 1].reshape(h, 2))

    flat_bounds = bounds  # (2H, 2), interleaved accel/steer
    x0 = dfo.normalize(guess.reshape(-1), flat_bounds)

    # The plan never strays more than a few meters from the vehicle, so
    # the nearest-waypoint search inside the objective can be confined to
    # the stretch of track around the current position.
    n = len(track)
    window_idx = None
    if n > 160:
        i0 = trackgeom.nearest_waypoint_index(track, (state.x, state.y))
        window_idx = (i0 + np.arange(-40, 101)) % n

    def decode(xnorm: np.ndarray) -> np.ndarray:
        u = dfo.denormalize(xnorm, flat_bounds)
        return np.clip(u, flat_bounds[:, 0], flat_bounds[:, 1]).reshape(h, 2)

    def objective(xnorm: np.ndarray) -> float:
        return _controls_cost(track, state, decode(xnorm), config, prev_input,
                              window_idx=window_idx)

    constraints = [lambda x: x + 1.0, lambda x: 1.0 - x]

    early_stop = None
    if config.early_stop_threshold is not None:
        threshold = config.early_stop_threshold

        def early_stop(xnorm: np.ndarray) -> bool:
            return _controls_xte_sum(track, state, decode(xnorm), config,
                                     window_idx=window_idx) < threshold

    solver_config = dfo.SolverConfig(
        max_iterations=config.max_iterations,
        rho_begin=config.rho_begin,
        rho_end=config.rho_end,
    )
    t0 = time.perf_counter()
    result = dfo.minimize(objective, constraints, x0, solver_config,
                          early_stop=early_stop)
    elapsed = time.perf_counter() - t0

    controls = decode(result.best_point)
    seq = ControlSequence.from_array(controls)
    return MpcSolution(
        sequence=seq,
        iterations_used=result.iterations_used,
        final_cost=result.best_value,
        early_stopped=result.stop_reason == "early_stop",
        planned_xte_sum=_controls_xte_sum(track, state, controls, config),
        solve_time=elapsed,
    )
