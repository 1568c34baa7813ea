"""Closed-loop evaluation of warm-start variants.

Runs full episodes under a chosen warm-start source, records per-step
solver effort and tracking accuracy, and aggregates comparisons across
tracks, variants and seeds into machine-readable tables plus a short
text summary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import mpc, policy as policy_mod, trackgeom
from .mpc import MpcConfig, WarmStartSource
from .policy import MlpParams
from .trackgeom import Track
from .vehicle import ControlInput, VehicleState, step as vehicle_step


@dataclass(frozen=True)
class EpisodeMetrics:
    completed_lap: bool
    steps: int
    mean_iterations: float
    mean_solve_time: float
    mean_xte: float
    max_xte: float
    off_track_step: Optional[int] = None

    def __post_init__(self):
        if self.completed_lap and self.off_track_step is not None:
            raise ValueError("completed_lap and off_track_step are exclusive")


@dataclass(frozen=True)
class Variant:
    name: str
    warm_start: WarmStartSource
    policy: Optional[MlpParams] = None


@dataclass(frozen=True)
class ExperimentPlan:
    tracks: dict          # name -> Track
    variants: tuple       # of Variant
    seeds: tuple
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.tracks or not self.variants or not self.seeds:
            raise ValueError("tracks, variants and seeds must be non-empty")


@dataclass(frozen=True)
class Report:
    columns: tuple
    rows: tuple           # of dicts keyed by columns
    summary: str

    def csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                                  else str(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"


def _resolve_policy(variant: Variant) -> Optional[MlpParams]:
    if variant.warm_start is not WarmStartSource.POLICY:
        return None
    if variant.policy is None:
        raise ValueError(f"variant {variant.name!r} uses a policy warm start "
                         "but no policy checkpoint was provided")
    return variant.policy


def run_episode(track: Track, config: MpcConfig, warm_start: WarmStartSource,
                policy: Optional[MlpParams] = None, seed: int = 0,
                max_steps: Optional[int] = None,
                lookahead: Optional[int] = None):
    """Drive one lap attempt from waypoint 0; returns (metrics, trace).

    The vehicle starts on waypoint 0 heading along the path at the
    reference speed.  Each step builds the variant's guess, solves the
    receding-horizon problem, applies the first input, and records
    solver effort and tracking error.  The trace has one record per
    executed step.  When `lookahead` is None it is inferred from the
    policy's input dimension (observations are 3 + 2*lookahead wide).
    """
    if warm_start is WarmStartSource.POLICY and policy is None:
        raise ValueError("policy warm start requires a policy")
    if lookahead is None:
        lookahead = (policy.input_dim - 3) // 2 if policy is not None else 10
    spec = config.vehicle
    if max_steps is None:
        max_steps = 2 * len(track) + 100
    state = VehicleState(track.xy[0, 0], track.xy[0, 1],
                         track.segment_heading(0), config.v_ref)
    tracker = trackgeom.LapTracker(track, 0)
    prev_input = ControlInput(0.0, 0.0)
    previous = None
    trace = []
    completed = False
    off_track_step = None
    for step_i in range(max_steps):
        guess = None
        source = warm_start
        if source is WarmStartSource.POLICY:
            obs = policy_mod.observe(track, state, lookahead).vector()
            mean = policy_mod.forward(policy, obs)
            guess = policy_mod.decode_action(np.clip(mean, -1.0, 1.0), spec)
        elif source is WarmStartSource.PREVIOUS_SHIFTED and previous is None:
            source = WarmStartSource.ZEROS
        solution = mpc.solve(track, state, config, source,
                             policy_guess=guess, previous=previous,
                             prev_input=prev_input)
        previous = solution
        u = solution.sequence[0]
        state = vehicle_step(state, u, spec)
        prev_input = u
        pos = (state.x, state.y)
        xte = trackgeom.cross_track_error(track, pos)
        trace.append({
            "step": step_i,
            "iterations": solution.iterations_used,
            "solve_time": solution.solve_time,
            "xte": xte,
            "curvature": trackgeom.local_curvature(track, pos),
            "early_stopped": solution.early_stopped,
        })
        i_near = trackgeom.nearest_waypoint_index(track, pos)
        if xte > track.half_width_at(i_near):
            off_track_step = step_i
            break
        if tracker.update(pos):
            completed = True
            break
    metrics = EpisodeMetrics(
        completed_lap=completed,
        steps=len(trace),
        mean_iterations=float(np.mean([r["iterations"] for r in trace])),
        mean_solve_time=float(np.mean([r["solve_time"] for r in trace])),
        mean_xte=float(np.mean([r["xte"] for r in trace])),
        max_xte=float(np.max([r["xte"] for r in trace])),
        off_track_step=off_track_step,
    )
    return metrics, trace


REPORT_COLUMNS = ("track", "variant", "seeds", "completed_fraction",
                  "mean_iterations", "std_iterations", "mean_solve_time",
                  "mean_xte", "std_xte", "max_xte")


def compare(plan: ExperimentPlan, config: MpcConfig) -> Report:
    """Aggregate per-(track, variant) episode metrics over the plan's seeds."""
    rows = []
    by_key = {}
    for track_name, track in plan.tracks.items():
        for variant in plan.variants:
            policy = _resolve_policy(variant)
            episodes = []
            for seed in plan.seeds:
                m, _ = run_episode(track, config, variant.warm_start,
                                   policy=policy, seed=seed,
                                   max_steps=plan.max_steps)
                episodes.append(m)
            iters = np.array([m.mean_iterations for m in episodes])
            xtes = np.array([m.mean_xte for m in episodes])
            row = {
                "track": track_name,
                "variant": variant.name,
                "seeds": len(plan.seeds),
                "completed_fraction": float(np.mean(
                    [m.completed_lap for m in episodes])),
                "mean_iterations": float(iters.mean()),
                "std_iterations": float(iters.std()),
                "mean_solve_time": float(np.mean(
                    [m.mean_solve_time for m in episodes])),
                "mean_xte": float(xtes.mean()),
                "std_xte": float(xtes.std()),
                "max_xte": float(np.max([m.max_xte for m in episodes])),
            }
            rows.append(row)
            by_key[(track_name, variant.name)] = row
    summary = _summary_text(rows, by_key)
    return Report(REPORT_COLUMNS, tuple(rows), summary)


def _summary_text(rows, by_key) -> str:
    lines = ["warm-start comparison"]
    for row in rows:
        lines.append(
            f"  {row['track']:<12s} {row['variant']:<16s} "
            f"iters {row['mean_iterations']:7.2f}  "
            f"xte {row['mean_xte']:7.4f} m  "
            f"laps {row['completed_fraction']:.0%}")
    tracks = {k[0] for k in by_key}
    variants = {k[1] for k in by_key}
    bc = next((v for v in variants if "bc" in v.lower()), None)
    ft = next((v for v in variants if "finetune" in v.lower()
               or "fine-tune" in v.lower()), None)
    if bc and ft:
        lines.append("relative improvement, fine-tuned vs behavior-cloned:")
        for track in sorted(tracks):
            a, b = by_key[(track, bc)], by_key[(track, ft)]
            di = _rel_gain(a["mean_iterations"], b["mean_iterations"])
            dx = _rel_gain(a["mean_xte"], b["mean_xte"])
            lines.append(f"  {track:<12s} iterations {di:+.1%}  xte {dx:+.1%}")
    return "\n".join(lines) + "\n"


def _rel_gain(before: float, after: float) -> float:
    if before == 0.0:
        return 0.0
    return (before - after) / before


def curvature_vs_xte(track: Track, config: MpcConfig,
                     warm_start: WarmStartSource,
                     policy: Optional[MlpParams] = None,
                     max_steps: Optional[int] = None):
    """(curvature, xte) record per executed step of one episode."""
    _, trace = run_episode(track, config, warm_start, policy=policy,
                           max_steps=max_steps)
    return [(r["curvature"], r["xte"]) for r in trace]


def scatter_csv(records) -> str:
    lines = ["curvature,xte"]
    for curvature, xte in records:
        lines.append(f"{float(curvature)!r},{float(xte)!r}")
    return "\n".join(lines) + "\n"
