"""Two-phase training: demonstrations, behavior cloning, fine-tuning."""

import io
import math

import numpy as np
import pytest

from mpcwarm import learn, policy as P, synth
from mpcwarm.learn import (Demonstration, FinetuneConfig, RolloutBuffer,
                           collect_demos, combined_loss, compute_reward,
                           finetune, gae_advantages, load_demos, ppo_losses,
                           save_demos, train_bc, write_metrics_csv)
from mpcwarm.mpc import MpcSolution, expert_config, realtime_config
from mpcwarm.vehicle import ControlInput, ControlSequence, VehicleSpec

SPEC = VehicleSpec()


def solution(iterations=50, xte=0.5, solve_time=0.01):
    seq = ControlSequence(tuple(ControlInput(0, 0) for _ in range(25)))
    return MpcSolution(seq, iterations, 0.0, False, xte, solve_time)


@pytest.fixture(scope="module")
def straight_track():
    return synth.make_track("straight")


@pytest.fixture(scope="module")
def straight_demos(straight_track):
    return collect_demos([straight_track], expert_config(), 30, SPEC,
                         episode_steps=10)


class TestCollectDemos:
    def test_count_exact(self, straight_demos):
        assert len(straight_demos) == 30

    def test_straight_targets_near_zero_steer(self, straight_track):
        demos = collect_demos([straight_track], expert_config(), 1, SPEC)
        steer = demos[0].target[1::2] * SPEC.steer_max
        assert np.max(np.abs(steer)) < 0.05

    def test_targets_decode_within_bounds(self, straight_demos):
        for d in straight_demos:
            seq = P.decode_action(np.clip(d.target, -1, 1), SPEC)
            arr = seq.as_array()
            assert np.all(arr[:, 0] >= SPEC.accel_min - 1e-9)
            assert np.all(arr[:, 0] <= SPEC.accel_max + 1e-9)
            assert np.all(np.abs(arr[:, 1]) <= SPEC.steer_max + 1e-9)

    def test_targets_round_trip(self, straight_demos):
        for d in straight_demos[:5]:
            seq = P.decode_action(d.target, SPEC)
            back = P.normalize_action(seq, SPEC)
            assert np.max(np.abs(back - d.target)) < 1e-12

    def test_invalid_count_rejected(self, straight_track):
        with pytest.raises(ValueError):
            collect_demos([straight_track], expert_config(), 0, SPEC)

    def test_demo_file_round_trip(self, straight_demos, tmp_path):
        path = tmp_path / "demos.json"
        save_demos(straight_demos, path)
        back = load_demos(path)
        assert len(back) == len(straight_demos)
        for a, b in zip(straight_demos, back):
            assert np.array_equal(a.obs, b.obs)
            assert np.array_equal(a.target, b.target)

    def test_demo_file_bad_version_rejected(self):
        with pytest.raises(ValueError, match="version"):
            load_demos(io.StringIO('{"format_version": 9, "obs_dim": 1, '
                                   '"action_dim": 1, "records": []}'))

    def test_demo_file_dimension_mismatch_rejected(self):
        doc = ('{"format_version": 1, "obs_dim": 3, "action_dim": 2, '
               '"records": [{"obs": [1, 2], "target": [0, 0]}]}')
        with pytest.raises(ValueError):
            load_demos(io.StringIO(doc))


class TestTrainBc:
    def test_fixed_point_when_targets_match_init(self):
        rng = np.random.default_rng(0)
        pol = P.init_policy(23, 25, rng)
        obs = rng.normal(size=(20, 23))
        targets = P.forward(pol, obs)
        demos = [Demonstration(o, t) for o, t in zip(obs, targets)]
        trained, hist = train_bc(pol, demos, epochs=3, seed=0)
        assert hist[-1]["train_loss"] < 1e-12
        assert np.max(np.abs(trained.weights[0] - pol.weights[0])) < 1e-6

    def test_constant_target_fit(self):
        rng = np.random.default_rng(1)
        pol = P.init_policy(23, 25, rng)
        obs = rng.normal(size=(40, 23))
        target = np.full(50, 0.2)
        demos = [Demonstration(o, target) for o in obs]
        _, hist = train_bc(pol, demos, epochs=200, batch_size=8, seed=0)
        assert hist[-1]["train_loss"] < 1e-3

    def test_history_finite_and_complete(self):
        rng = np.random.default_rng(2)
        pol = P.init_policy(23, 25, rng)
        demos = [Demonstration(rng.normal(size=23),
                               rng.uniform(-0.5, 0.5, 50)) for _ in range(20)]
        _, hist = train_bc(pol, demos, epochs=5, seed=0)
        assert len(hist) == 5
        for row in hist:
            assert math.isfinite(row["train_loss"])
            assert math.isfinite(row["val_loss"])

    def test_bit_reproducible(self):
        rng = np.random.default_rng(3)
        demos = [Demonstration(rng.normal(size=23),
                               rng.uniform(-0.5, 0.5, 50)) for _ in range(20)]
        p0 = P.init_policy(23, 25, np.random.default_rng(9))
        a, _ = train_bc(p0.copy(), demos, epochs=3, seed=11)
        b, _ = train_bc(p0.copy(), demos, epochs=3, seed=11)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_empty_demos_rejected(self):
        with pytest.raises(ValueError):
            train_bc(P.init_policy(23, 25, np.random.default_rng(0)), [])


class TestReward:
    def test_zero_case(self):
        assert compute_reward(solution(iterations=0, xte=0.0)) == 0.0

    def test_formula(self):
        r = compute_reward(solution(iterations=50, xte=0.5))
        assert r == pytest.approx(-(0.08 + 0.5))

    def test_monotone_in_iterations(self):
        r1 = compute_reward(solution(iterations=10, xte=0.2))
        r2 = compute_reward(solution(iterations=20, xte=0.2))
        assert r2 < r1

    def test_wall_clock_mode(self):
        r = compute_reward(solution(iterations=50, xte=0.5, solve_time=0.03),
                           time_mode="wall_clock")
        assert r == pytest.approx(-(0.03 + 0.5))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            compute_reward(solution(), time_mode="cycles")


def _filled_buffer(rewards, values, dones, last_value=0.0):
    buf = RolloutBuffer()
    for r, v, d in zip(rewards, values, dones):
        buf.append(np.zeros(3), np.zeros(2), 0.0, r, v, np.zeros(2), d)
    buf.last_value = last_value
    return buf


class TestGae:
    def test_single_step_identity(self):
        buf = _filled_buffer([2.5], [0.0], [True])
        adv, ret = gae_advantages(buf, 1.0, 1.0)
        assert ret[0] == pytest.approx(2.5)

    def test_perfect_baseline_zero_advantage(self):
        # constant reward 1 with gamma=0.5: value of every state is 2
        buf = _filled_buffer([1.0] * 50, [2.0] * 50, [False] * 50,
                             last_value=2.0)
        adv, ret = gae_advantages(buf, 0.5, 0.95)
        raw = ret - np.array(buf.values)
        assert np.max(np.abs(raw)) < 1e-9

    def test_episode_boundaries_independent(self):
        rng = np.random.default_rng(4)
        r1, v1 = rng.normal(size=5), rng.normal(size=5)
        r2, v2 = rng.normal(size=7), rng.normal(size=7)
        joint = _filled_buffer(
            np.concatenate([r1, r2]), np.concatenate([v1, v2]),
            [False] * 4 + [True] + [False] * 6 + [True])
        a1 = _filled_buffer(r1, v1, [False] * 4 + [True])
        a2 = _filled_buffer(r2, v2, [False] * 6 + [True])
        _, ret_joint = gae_advantages(joint, 0.99, 0.95)
        _, ret_1 = gae_advantages(a1, 0.99, 0.95)
        _, ret_2 = gae_advantages(a2, 0.99, 0.95)
        assert np.allclose(ret_joint, np.concatenate([ret_1, ret_2]),
                           atol=1e-12)

    def test_advantages_normalized(self):
        rng = np.random.default_rng(5)
        buf = _filled_buffer(rng.normal(size=30), rng.normal(size=30),
                             [False] * 29 + [True])
        adv, _ = gae_advantages(buf, 0.99, 0.95)
        assert adv.mean() == pytest.approx(0.0, abs=1e-9)
        assert adv.std() == pytest.approx(1.0, abs=1e-6)

    def test_mismatched_buffer_rejected(self):
        buf = _filled_buffer([1.0], [0.0], [True])
        buf.rewards.append(1.0)
        with pytest.raises(ValueError):
            gae_advantages(buf, 0.99, 0.95)


class TestPpoLosses:
    def _setup(self):
        rng = np.random.default_rng(6)
        pol = P.init_policy(23, 25, rng)
        val = P.init_value(23, rng)
        obs = rng.normal(size=(8, 23))
        actions = P.forward(pol, obs) + 0.1 * rng.normal(size=(8, 50))
        mb = {
            "obs": obs,
            "actions": actions,
            "advantages": rng.normal(size=8),
            "old_log_probs": P.log_prob(pol, obs, actions),
            "returns": rng.normal(size=8),
        }
        return pol, val, mb

    def test_unit_ratio_gives_negative_mean_advantage(self):
        pol, val, mb = self._setup()
        l_policy, _, _ = ppo_losses(pol, val, mb, clip=0.2)
        assert l_policy == pytest.approx(-float(np.mean(mb["advantages"])),
                                         abs=1e-9)

    def test_value_loss_zero_when_exact(self):
        pol, val, mb = self._setup()
        mb["returns"] = P.forward(val, mb["obs"])[:, 0]
        _, _, l_value = ppo_losses(pol, val, mb, clip=0.2)
        assert l_value == pytest.approx(0.0, abs=1e-18)

    def test_entropy_closed_form(self):
        pol, val, mb = self._setup()
        _, l_entropy, _ = ppo_losses(pol, val, mb, clip=0.2)
        expected = -float(np.sum(pol.log_std
                                 + 0.5 * math.log(2 * math.pi * math.e)))
        assert l_entropy == pytest.approx(expected, abs=1e-12)


class TestCombinedLoss:
    def test_pure_rl(self):
        assert combined_loss(3.0, 7.0, 1.0) == 3.0

    def test_pure_imitation(self):
        assert combined_loss(3.0, 7.0, 0.0) == 7.0

    def test_default_mix(self):
        assert combined_loss(1.0, 2.0, 0.9) == pytest.approx(1.1)

    def test_invalid_mix_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(1.0, 2.0, 1.5)


class TestFinetuneConfig:
    def test_defaults_match_published_table(self):
        cfg = FinetuneConfig()
        assert cfg.mix == 0.9
        assert cfg.policy_weight == 0.5
        assert cfg.entropy_weight == 0.0
        assert cfg.value_weight == 0.5
        assert cfg.gamma == 0.99

    def test_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(mix=1.2)
        with pytest.raises(ValueError):
            FinetuneConfig(gamma=1.0)
        with pytest.raises(ValueError):
            FinetuneConfig(clip=0.0)


class TestFinetune:
    def _pretrained(self, straight_track):
        demos = collect_demos([straight_track], expert_config(), 20, SPEC,
                              lookahead=10, episode_steps=10)
        rng = np.random.default_rng(7)
        pol = P.init_policy(23, 25, rng)
        pol, _ = train_bc(pol, demos, epochs=20, seed=0)
        val = P.init_value(23, rng)
        return pol, val

    def test_zero_learning_rate_freezes_policy(self, straight_track):
        pol, val = self._pretrained(straight_track)
        cfg = FinetuneConfig(steps_per_batch=12, epochs=1, minibatch_size=8,
                             learning_rate=0.0, lookahead=10)
        out, _, metrics = finetune(pol.copy(), val, [straight_track],
                                   realtime_config(), cfg, total_steps=12,
                                   seed=0)
        for a, b in zip(pol.weights, out.weights):
            assert np.array_equal(a, b)
        assert len(metrics) == 1

    def test_metrics_rows_per_batch(self, straight_track):
        pol, val = self._pretrained(straight_track)
        cfg = FinetuneConfig(steps_per_batch=10, epochs=1, minibatch_size=8,
                             lookahead=10)
        _, _, metrics = finetune(pol, val, [straight_track],
                                 realtime_config(), cfg, total_steps=20,
                                 seed=0)
        assert len(metrics) == 2
        for row in metrics:
            assert set(row) == set(learn.METRICS_COLUMNS)

    def test_bit_reproducible(self, straight_track):
        pol, val = self._pretrained(straight_track)
        cfg = FinetuneConfig(steps_per_batch=10, epochs=2, minibatch_size=8,
                             lookahead=10)
        a, _, ma = finetune(pol.copy(), val.copy(), [straight_track],
                            realtime_config(), cfg, total_steps=10, seed=3)
        b, _, mb = finetune(pol.copy(), val.copy(), [straight_track],
                            realtime_config(), cfg, total_steps=10, seed=3)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        assert ma == mb

    def test_metrics_csv_format(self):
        rows = [{c: (i if c == "batch" else float(i) / 3)
                 for c in learn.METRICS_COLUMNS} for i in range(2)]
        sink = io.StringIO()
        write_metrics_csv(rows, sink)
        lines = sink.getvalue().splitlines()
        assert lines[0] == ",".join(learn.METRICS_COLUMNS)
        assert len(lines) == 3
