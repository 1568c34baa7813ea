"""Closed-loop evaluation harness."""

import numpy as np
import pytest

from mpcwarm import bench, policy as P, synth
from mpcwarm.bench import (EpisodeMetrics, ExperimentPlan, Variant, compare,
                           curvature_vs_xte, run_episode, scatter_csv)
from mpcwarm.mpc import WarmStartSource, realtime_config


@pytest.fixture(scope="module")
def straight_track():
    return synth.make_track("straight")


class TestEpisodeMetrics:
    def test_exclusive_outcomes(self):
        with pytest.raises(ValueError):
            EpisodeMetrics(completed_lap=True, steps=5, mean_iterations=1.0,
                           mean_solve_time=0.0, mean_xte=0.0, max_xte=0.0,
                           off_track_step=3)


class TestRunEpisode:
    def test_trace_length_matches_steps(self, straight_track):
        m, trace = run_episode(straight_track, realtime_config(),
                               WarmStartSource.ZEROS, max_steps=30)
        assert len(trace) == m.steps

    def test_mean_xte_consistent_with_trace(self, straight_track):
        m, trace = run_episode(straight_track, realtime_config(),
                               WarmStartSource.ZEROS, max_steps=30)
        assert m.mean_xte == pytest.approx(
            float(np.mean([r["xte"] for r in trace])), abs=1e-12)

    def test_zeros_on_straight_early_stops(self, straight_track):
        m, trace = run_episode(straight_track, realtime_config(),
                               WarmStartSource.ZEROS, max_steps=40)
        assert m.mean_iterations < 5.0
        assert all(r["iterations"] >= 1 for r in trace)

    def test_previous_shifted_runs(self, straight_track):
        m, _ = run_episode(straight_track, realtime_config(),
                           WarmStartSource.PREVIOUS_SHIFTED, max_steps=20)
        assert m.steps == 20

    def test_policy_requires_policy(self, straight_track):
        with pytest.raises(ValueError):
            run_episode(straight_track, realtime_config(),
                        WarmStartSource.POLICY)

    def test_policy_variant_runs(self, straight_track):
        pol = P.init_policy(23, 25, np.random.default_rng(0))
        pol.weights[-1] *= 0.0  # zero output: equivalent to a zeros guess
        m, _ = run_episode(straight_track, realtime_config(),
                           WarmStartSource.POLICY, policy=pol, max_steps=20)
        assert m.steps <= 20

    def test_deterministic(self, straight_track):
        a, _ = run_episode(straight_track, realtime_config(),
                           WarmStartSource.ZEROS, max_steps=25)
        b, _ = run_episode(straight_track, realtime_config(),
                           WarmStartSource.ZEROS, max_steps=25)
        assert (a.mean_iterations, a.mean_xte, a.steps) == \
            (b.mean_iterations, b.mean_xte, b.steps)


class TestCompare:
    def test_single_cell_report(self, straight_track):
        plan = ExperimentPlan({"straight": straight_track},
                              (Variant("zeros", WarmStartSource.ZEROS),),
                              (0,), max_steps=15)
        report = compare(plan, realtime_config())
        assert len(report.rows) == 1
        assert report.rows[0]["track"] == "straight"
        assert report.csv().count("\n") == 2

    def test_reruns_identical(self, straight_track):
        plan = ExperimentPlan({"straight": straight_track},
                              (Variant("zeros", WarmStartSource.ZEROS),),
                              (0, 1), max_steps=10)
        a = compare(plan, realtime_config())
        b = compare(plan, realtime_config())
        for ra, rb in zip(a.rows, b.rows):
            da = {k: v for k, v in ra.items() if k != "mean_solve_time"}
            db = {k: v for k, v in rb.items() if k != "mean_solve_time"}
            assert da == db
        assert a.summary == b.summary

    def test_missing_policy_named_in_error(self, straight_track):
        plan = ExperimentPlan(
            {"straight": straight_track},
            (Variant("bc_variant", WarmStartSource.POLICY, None),),
            (0,), max_steps=5)
        with pytest.raises(ValueError, match="bc_variant"):
            compare(plan, realtime_config())

    def test_improvement_lines_present(self, straight_track):
        pol = P.init_policy(23, 25, np.random.default_rng(0))
        pol.weights[-1] *= 0.0
        plan = ExperimentPlan(
            {"straight": straight_track},
            (Variant("bc", WarmStartSource.POLICY, pol),
             Variant("finetuned", WarmStartSource.POLICY, pol)),
            (0,), max_steps=8)
        report = compare(plan, realtime_config())
        assert "relative improvement" in report.summary

    def test_empty_plan_rejected(self, straight_track):
        with pytest.raises(ValueError):
            ExperimentPlan({}, (Variant("z", WarmStartSource.ZEROS),), (0,))


class TestCurvatureScatter:
    def test_straight_track_zero_curvature(self, straight_track):
        records = curvature_vs_xte(straight_track, realtime_config(),
                                   WarmStartSource.ZEROS, max_steps=15)
        assert len(records) == 15
        assert all(abs(c) < 1e-9 for c, _ in records)

    def test_circle_constant_curvature(self):
        track = synth.make_track("circle")
        records = curvature_vs_xte(track, realtime_config(),
                                   WarmStartSource.ZEROS, max_steps=10)
        curvatures = [c for c, _ in records]
        assert max(curvatures) - min(curvatures) < 1e-9

    def test_csv_shape(self, straight_track):
        records = curvature_vs_xte(straight_track, realtime_config(),
                                   WarmStartSource.ZEROS, max_steps=5)
        text = scatter_csv(records)
        lines = text.splitlines()
        assert lines[0] == "curvature,xte"
        assert len(lines) == 6
