"""Derivative-free solver contract."""

import numpy as np
import pytest

from mpcwarm import dfo
from mpcwarm.dfo import SolverConfig, denormalize, minimize, normalize


class TestConfig:
    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)

    def test_invalid_radii(self):
        with pytest.raises(ValueError):
            SolverConfig(rho_begin=0.1, rho_end=0.5)


class TestMinimize:
    def test_1d_quadratic_converges(self):
        res = minimize(lambda x: (x[0] - 3.0) ** 2, [], [0.0],
                       SolverConfig(max_iterations=200))
        assert abs(res.best_point[0] - 3.0) < 1e-3
        assert res.stop_reason == "converged"

    def test_active_constraint(self):
        res = minimize(lambda x: x[0], [lambda x: x[0] - 1.0], [5.0],
                       SolverConfig(max_iterations=200))
        assert res.best_point[0] == pytest.approx(1.0, abs=1e-3)

    def test_early_stop_predicate(self):
        res = minimize(lambda x: (x[0] - 3.0) ** 2, [], [0.0],
                       SolverConfig(max_iterations=200),
                       early_stop=lambda x: (x[0] - 3.0) ** 2 < 0.5)
        assert res.stop_reason == "early_stop"
        assert res.best_value < 0.5

    def test_early_stop_at_x0(self):
        res = minimize(lambda x: x[0] ** 2, [], [0.1],
                       SolverConfig(max_iterations=200),
                       early_stop=lambda x: True)
        assert res.stop_reason == "early_stop"
        assert res.iterations_used == 1

    def test_budget_is_exact_eval_cap(self):
        calls = []
        res = minimize(lambda x: calls.append(1) or float(np.sum(x * x)),
                       [], np.full(6, 0.8), SolverConfig(max_iterations=25))
        assert res.iterations_used <= 25
        assert res.iterations_used == len(calls)

    def test_2d_clamped_quadratic(self):
        # minimum of (x-2)^2 + (y+3)^2 inside the box [-1,1]^2 is (1, -1)
        def f(x):
            return (x[0] - 2.0) ** 2 + (x[1] + 3.0) ** 2
        cons = [lambda x: x + 1.0, lambda x: 1.0 - x]
        res = minimize(f, cons, np.zeros(2), SolverConfig(max_iterations=200))
        assert res.iterations_used <= 200
        assert np.allclose(res.best_point, [1.0, -1.0], atol=1e-3)

    def test_non_finite_x0_rejected(self):
        with pytest.raises(ValueError):
            minimize(lambda x: float("inf"), [], [0.0], SolverConfig())

    def test_non_finite_mid_search_tolerated(self):
        def f(x):
            if 0.5 < x[0] < 1.5:
                return float("nan")
            return (x[0] - 3.0) ** 2
        res = minimize(f, [], [0.0], SolverConfig(max_iterations=200))
        assert np.isfinite(res.best_value)

    def test_trace_monotone_non_increasing(self):
        def f(x):
            return float(np.sum((x - 0.3) ** 2))
        res = minimize(f, [], np.zeros(4),
                       SolverConfig(max_iterations=100, record_trace=True))
        trace = np.array(res.trace)
        assert np.all(np.diff(trace) <= 1e-12)

    def test_deterministic(self):
        def run():
            return minimize(lambda x: float(np.sum((x - 0.37) ** 2)),
                            [lambda x: x + 1.0, lambda x: 1.0 - x],
                            np.full(5, -0.5), SolverConfig(max_iterations=80))
        a, b = run(), run()
        assert np.array_equal(a.best_point, b.best_point)
        assert a.best_value == b.best_value
        assert a.iterations_used == b.iterations_used
        assert a.stop_reason == b.stop_reason

    def test_best_point_feasible_or_least_infeasible(self):
        cons = [lambda x: x + 1.0, lambda x: 1.0 - x]
        res = minimize(lambda x: float(np.sum(x * x)), cons, np.zeros(3),
                       SolverConfig(max_iterations=120))
        assert np.all(res.best_point >= -1.0 - 1e-6)
        assert np.all(res.best_point <= 1.0 + 1e-6)

    def test_returned_value_matches_objective(self):
        def f(x):
            return float(np.sum((x - 0.2) ** 2))
        res = minimize(f, [], np.zeros(3), SolverConfig(max_iterations=60))
        assert res.best_value == pytest.approx(f(res.best_point), abs=1e-12)


class TestNormalize:
    BOUNDS = np.array([[-5.0, 5.0], [-0.52, 0.52]])

    def test_min_maps_to_minus_one(self):
        assert np.allclose(normalize([-5.0, -0.52], self.BOUNDS), [-1, -1])

    def test_midpoint_maps_to_zero(self):
        assert np.allclose(normalize([0.0, 0.0], self.BOUNDS), [0, 0])

    def test_round_trip_100_random(self):
        rng = np.random.default_rng(5)
        bounds = np.stack([rng.uniform(-10, 0, 8),
                           rng.uniform(0.1, 10, 8)], axis=1)
        for _ in range(100):
            x = rng.uniform(bounds[:, 0], bounds[:, 1])
            back = denormalize(normalize(x, bounds), bounds)
            assert np.max(np.abs(back - x)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            normalize([1.0, 2.0, 3.0], self.BOUNDS)

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ValueError):
            normalize([0.0], np.array([[1.0, 1.0]]))
