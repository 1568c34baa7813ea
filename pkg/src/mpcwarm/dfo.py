"""Derivative-free constrained minimization with warm start and early stop.

Wraps a COBYLA-family solver (linear approximations over a simplex with a
shrinking trust region) behind a small contract the controller relies on:

* one "iteration" is one objective evaluation, hard-capped by the config;
* a caller-supplied predicate can stop the search as soon as the incumbent
  is good enough;
* the incumbent is tracked here, so the returned point is the best
  feasible (or least infeasible) point actually evaluated, regardless of
  where the underlying solver wandered.

The search itself is deterministic: identical inputs give identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

_WORST = 1e30
_FEAS_TOL = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    rho_begin: float = 0.5
    rho_end: float = 1e-4
    record_trace: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.rho_end <= self.rho_begin:
            raise ValueError("need 0 < rho_end <= rho_begin")


@dataclass
class SolverResult:
    best_point: np.ndarray
    best_value: float
    iterations_used: int
    stop_reason: str  # "early_stop" | "max_iterations" | "converged"
    trace: Optional[list] = None


class _Search:
    """Mutable evaluation bookkeeping shared with the scipy callback."""

    def __init__(self, objective, constraints, x0, f0, config, early_stop):
        self.objective = objective
        self.constraints = constraints
        self.config = config
        self.early_stop = early_stop
        self.evals = 1  # the validated x0 evaluation counts
        self.x0 = x0
        self.f0 = f0
        self.x0_cached = False
        self.stop_reason = None
        self.trace = [] if config.record_trace else None
        self.best_x = x0.copy()
        self.best_f = f0
        self.best_viol = self._violation(x0)
        self._note_incumbent()

    def _violation(self, x) -> float:
        worst = 0.0
        for c in self.constraints:
            val = np.asarray(c(x), dtype=float)
            if val.size:
                worst = max(worst, float(np.max(np.maximum(0.0, -val))))
        return worst

    def _note_incumbent(self):
        if self.trace is not None:
            self.trace.append(self.best_f)
        if self.early_stop is not None and self.stop_reason is None:
            if self.early_stop(self.best_x):
                self.stop_reason = "early_stop"

    def __call__(self, x):
        if self.stop_reason is not None:
            # poisoned objective drives the solver to a quick exit
            return _WORST
        if not self.x0_cached and np.array_equal(x, self.x0):
            self.x0_cached = True
            return self.f0
        if self.evals >= self.config.max_iterations:
            self.stop_reason = "max_iterations"
            return _WORST
        self.evals += 1
        f = float(self.objective(x))
        if not np.isfinite(f):
            f = _WORST
        viol = self._violation(x)
        improved = False
        if viol < self.best_viol - _FEAS_TOL and self.best_viol > _FEAS_TOL:
            improved = True
        elif viol <= self.best_viol + _FEAS_TOL and f < self.best_f:
            improved = True
        if improved:
            self.best_x = np.array(x, dtype=float)
            self.best_f = f
            self.best_viol = min(viol, self.best_viol)
        if self.trace is not None:
            self.trace.append(self.best_f)
        if improved and self.early_stop is not None and self.stop_reason is None:
            if self.early_stop(self.best_x):
                self.stop_reason = "early_stop"
        if self.evals >= self.config.max_iterations and self.stop_reason is None:
            self.stop_reason = "max_iterations"
        return f


def minimize(objective: Callable[[np.ndarray], float],
             inequality_constraints: Sequence[Callable],
             x0,
             config: SolverConfig,
             early_stop: Optional[Callable[[np.ndarray], bool]] = None
             ) -> SolverResult:
    """Minimize objective subject to c(x) >= 0 for each constraint.

    Stops at the first of: early_stop(incumbent) true, trust region shrunk
    below rho_end, or the evaluation budget exhausted.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = float(objective(x0))
    if not np.isfinite(f0):
        raise ValueError(f"objective is non-finite at x0: {f0}")

    search = _Search(objective, list(inequality_constraints), x0, f0,
                     config, early_stop)
    scipy_converged = False
    if search.stop_reason is None and config.max_iterations > 1:
        cons = [{"type": "ineq", "fun": c} for c in search.constraints]
        res = _scipy_minimize(
            search, x0, method="COBYLA", constraints=cons,
            options={"rhobeg": config.rho_begin,
                     "tol": config.rho_end,
                     "maxiter": config.max_iterations})
        scipy_converged = bool(res.status == 1)

    if search.stop_reason is not None:
        reason = search.stop_reason
    elif scipy_converged:
        reason = "converged"
    else:
        reason = "max_iterations"
    return SolverResult(
        best_point=search.best_x,
        best_value=search.best_f,
        iterations_used=search.evals,
        stop_reason=reason,
        trace=search.trace,
    )


def normalize(point, bounds) -> np.ndarray:
    """Affine map of a decision vector into [-1, 1] per dimension."""
    point = np.asarray(point, dtype=float)
    lo, hi = _split_bounds(point, bounds)
    return (2.0 * point - (hi + lo)) / (hi - lo)


def denormalize(point, bounds) -> np.ndarray:
    """Inverse of normalize: [-1, 1] coordinates back to physical units."""
    point = np.asarray(point, dtype=float)
    lo, hi = _split_bounds(point, bounds)
    return 0.5 * (point * (hi - lo) + hi + lo)


def _split_bounds(point, bounds):
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError("bounds must have shape (n, 2)")
    if bounds.shape[0] != point.shape[-1]:
        raise ValueError(
            f"dimension mismatch: point has {point.shape[-1]}, "
            f"bounds has {bounds.shape[0]}")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(lo >= hi):
        raise ValueError("bounds must satisfy min < max per dimension")
    return lo, hi
