"""Two-phase training of the warm-start policy.

Phase 1 collects closed-loop demonstrations from a high-budget expert
controller started from all-zero guesses and behavior-clones them.
Phase 2 runs the policy online: every step the fast (50-evaluation,
early-stopping) controller refines the policy's guess, the refined
solution is both the applied control and the imitation target, and the
policy is updated with a clipped-surrogate policy-gradient loss blended
with the imitation loss.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import mpc, policy as policy_mod, trackgeom
from .mpc import MpcConfig, MpcSolution, WarmStartSource
from .policy import MlpParams, Observation
from .trackgeom import Track
from .vehicle import ControlInput, VehicleSpec, VehicleState, step as vehicle_step

logger = logging.getLogger(__name__)

DEMO_FORMAT_VERSION = 1
METRICS_COLUMNS = ("batch", "mean_reward", "mean_iterations", "mean_xte",
                   "L_policy", "L_value", "L_imitation")

# nominal seconds per solver iteration: 0.08 s worst case / 50 iterations
T_ITER_NOMINAL = 0.0016


class ExpertIncompetentError(RuntimeError):
    """The demonstration expert keeps leaving the track."""


@dataclass(frozen=True)
class Demonstration:
    obs: np.ndarray      # observation vector
    target: np.ndarray   # normalized 2H expert solution, in [-1, 1]


@dataclass(frozen=True)
class FinetuneConfig:
    mix: float = 0.9            # weight of the RL loss vs imitation
    policy_weight: float = 0.5
    entropy_weight: float = 0.0
    value_weight: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    steps_per_batch: int = 2048
    learning_rate: float = 3e-4
    lookahead: int = 10
    max_episode_steps: int = 5000
    # exploration scale at the start of fine-tuning; None keeps the
    # network's current log_std
    exploration_log_std: Optional[float] = -2.5
    # warm-start guess handed to the solver: the policy mean gives a
    # refined solution that is never worse than the policy's own plan
    # (the solver's incumbent starts at the guess), so the imitation
    # target genuinely improves on the student; "sample" explores in
    # input space but makes the target a refinement of noise
    guess_source: str = "mean"
    # episode starts cycle this waypoint list (modulo track length);
    # None starts every episode at waypoint 0
    start_indices: Optional[tuple] = None
    # scales a small random perturbation of each episode's start pose
    start_jitter: float = 0.0
    # train the imitation term on the union of all batches collected so
    # far (DAgger dataset aggregation) instead of the newest batch only
    aggregate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must be in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not self.clip > 0.0:
            raise ValueError("clip must be positive")
        if self.guess_source not in ("mean", "sample"):
            raise ValueError("guess_source must be 'mean' or 'sample'")


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    targets: list = field(default_factory=list)   # fast-MPC imitation targets
    dones: list = field(default_factory=list)     # episode-boundary flags
    last_value: float = 0.0                       # bootstrap for a cut episode

    def __len__(self) -> int:
        return len(self.obs)

    def append(self, obs, action, log_prob, reward, value, target, done):
        self.obs.append(np.asarray(obs, float))
        self.actions.append(np.asarray(action, float))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.targets.append(np.asarray(target, float))
        self.dones.append(bool(done))

    def validate(self):
        n = len(self.obs)
        for name in ("actions", "log_probs", "rewards", "values", "targets",
                     "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} length mismatch")


def compute_reward(solution: MpcSolution, time_mode: str = "iterations_proxy",
                   t_iter_nominal: float = T_ITER_NOMINAL) -> float:
    """Negative solver-time term minus the plan's accumulated xte."""
    if time_mode == "iterations_proxy":
        time_term = solution.iterations_used * t_iter_nominal
    elif time_mode == "wall_clock":
        time_term = solution.solve_time
    else:
        raise ValueError(f"unknown time mode {time_mode!r}")
    return -time_term - solution.planned_xte_sum


def gae_advantages(buffer: RolloutBuffer, gamma: float, gae_lambda: float):
    """Generalized advantage estimation with episode-boundary resets.

    Returns (normalized advantages, returns); returns are raw advantages
    plus the stored value estimates.
    """
    buffer.validate()
    n = len(buffer)
    rewards = np.asarray(buffer.rewards)
    values = np.asarray(buffer.values)
    dones = np.asarray(buffer.dones, dtype=bool)
    adv = np.empty(n)
    running = 0.0
    next_value = buffer.last_value
    for t in range(n - 1, -1, -1):
        if dones[t]:
            running = 0.0
            next_value = 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * gae_lambda * running
        adv[t] = running
        next_value = values[t]
    returns = adv + values
    std = adv.std()
    normalized = (adv - adv.mean()) / (std + 1e-8)
    return normalized, returns


def ppo_losses(policy: MlpParams, value_net: MlpParams, minibatch: dict,
               clip: float):
    """Component losses of the RL objective on one minibatch.

    minibatch carries obs, actions, advantages, old_log_probs, returns.
    """
    obs = np.atleast_2d(minibatch["obs"])
    actions = np.atleast_2d(minibatch["actions"])
    adv = np.asarray(minibatch["advantages"], float)
    old_lp = np.asarray(minibatch["old_log_probs"], float)
    returns = np.asarray(minibatch["returns"], float)

    new_lp = policy_mod.log_prob(policy, obs, actions)
    ratio = np.exp(new_lp - old_lp)
    surrogate = np.minimum(ratio * adv,
                           np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    l_policy = -float(np.mean(surrogate))
    l_entropy = -policy_mod.entropy(policy)
    v = policy_mod.forward(value_net, obs)[:, 0]
    l_value = float(np.mean((v - returns) ** 2))
    return l_policy, l_entropy, l_value


def combined_loss(l_rl: float, l_imitation: float, mix: float) -> float:
    """Affine blend of the RL and imitation losses."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must be in [0, 1]")
    return mix * l_rl + (1.0 - mix) * l_imitation


def _start_state(track: Track, index: int, v: float,
                 rng: Optional[np.random.Generator] = None,
                 jitter: float = 0.0) -> VehicleState:
    x, y = track.xy[index]
    heading = track.segment_heading(index)
    if jitter > 0.0 and rng is not None:
        lon = jitter * 0.08 * rng.standard_normal()
        lat = jitter * 0.03 * rng.standard_normal()
        x += lon * np.cos(heading) - lat * np.sin(heading)
        y += lon * np.sin(heading) + lat * np.cos(heading)
        heading += jitter * 0.01 * rng.standard_normal()
        v += jitter * 0.2 * rng.standard_normal()
    return VehicleState(x, y, heading, v)


def _off_track(track: Track, state: VehicleState) -> bool:
    pos = (state.x, state.y)
    i = trackgeom.nearest_waypoint_index(track, pos)
    return trackgeom.cross_track_error(track, pos) > track.half_width_at(i)


def collect_demos(tracks, expert: MpcConfig, n: int, spec: VehicleSpec,
                  lookahead: int = 10, episode_steps: int = 200,
                  start_indices=None, start_jitter: float = 0.0,
                  seed: int = 0, progress: bool = False):
    """Closed-loop expert rollouts stored as (observation, target) pairs.

    Episodes cycle through the tracks round-robin, each starting at the
    next entry of `start_indices` (default: evenly spaced around the
    lap so corners are represented), and reset on off-track, lap
    completion or after `episode_steps` steps.  `start_jitter` scales a
    small random perturbation of each episode's start pose and speed so
    the expert also demonstrates how to recover from tracking offsets.
    """
    if n < 1:
        raise ValueError("need n >= 1 demonstrations")
    rng = np.random.default_rng(seed)
    demos = []
    total_steps = 0
    off_track_steps = 0
    episode = 0
    n_episodes_guess = max(1, -(-n // episode_steps))
    while len(demos) < n:
        track = tracks[episode % len(tracks)]
        if start_indices is not None:
            start = start_indices[episode % len(start_indices)] % len(track)
        else:
            lap_slot = episode // len(tracks)
            start = (lap_slot * len(track) // n_episodes_guess) % len(track)
        state = _start_state(track, start, expert.v_ref, rng, start_jitter)
        tracker = trackgeom.LapTracker(track, start)
        prev_input = ControlInput(0.0, 0.0)
        for _ in range(episode_steps):
            if len(demos) >= n:
                break
            obs = policy_mod.observe(track, state, lookahead)
            solution = mpc.solve(track, state, expert, WarmStartSource.ZEROS,
                                 prev_input=prev_input)
            target = policy_mod.normalize_action(solution.sequence, spec)
            demos.append(Demonstration(obs.vector(), target))
            u = solution.sequence[0]
            state = vehicle_step(state, u, spec)
            prev_input = u
            total_steps += 1
            if _off_track(track, state):
                off_track_steps += 1
                break
            if tracker.update((state.x, state.y)):
                break
        episode += 1
        if total_steps >= 20 and off_track_steps > 0.5 * episode:
            raise ExpertIncompetentError(
                f"expert left the track in {off_track_steps} of {episode} "
                "episodes; refusing to clone an incompetent expert")
        if progress:
            logger.info("collected %d/%d demonstrations", len(demos), n)
    return demos


def save_demos(demos, sink) -> None:
    doc = {
        "format_version": DEMO_FORMAT_VERSION,
        "obs_dim": len(demos[0].obs) if demos else 0,
        "action_dim": len(demos[0].target) if demos else 0,
        "records": [{"obs": d.obs.tolist(), "target": d.target.tolist()}
                    for d in demos],
    }
    if hasattr(sink, "write"):
        json.dump(doc, sink)
    else:
        with open(sink, "w") as fh:
            json.dump(doc, fh)


def load_demos(source):
    if hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    if doc.get("format_version") != DEMO_FORMAT_VERSION:
        raise ValueError(f"unsupported demo file version: {doc.get('format_version')}")
    demos = []
    for rec in doc["records"]:
        obs = np.array(rec["obs"], dtype=float)
        target = np.array(rec["target"], dtype=float)
        if len(obs) != doc["obs_dim"] or len(target) != doc["action_dim"]:
            raise ValueError("demo record dimensions disagree with header")
        demos.append(Demonstration(obs, target))
    return demos


def train_bc(params: MlpParams, demos, epochs: int = 200,
             batch_size: int = 64, learning_rate: float = 1e-3,
             validation_fraction: float = 0.1, seed: int = 0):
    """Behavior cloning: minimize mean squared error to the expert targets."""
    if not demos:
        raise ValueError("empty demonstration set")
    rng = np.random.default_rng(seed)
    obs = np.stack([d.obs for d in demos])
    targets = np.stack([d.target for d in demos])
    n = len(demos)
    perm = rng.permutation(n)
    n_val = int(round(n * validation_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation fraction leaves no training data")

    state = policy_mod.AdamState.for_params(params)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        losses = []
        for lo in range(0, len(order), batch_size):
            idx = train_idx[order[lo:lo + batch_size]]
            grads, info = policy_mod.gradients(
                params, obs[idx], "mse", targets=targets[idx])
            if not np.isfinite(info["loss"]):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}")
            params = policy_mod.adam_update(params, grads, state, learning_rate)
            losses.append(info["loss"])
        train_loss = float(np.mean(losses))
        if len(val_idx):
            pred = policy_mod.forward(params, obs[val_idx])
            val_loss = float(np.mean((pred - targets[val_idx]) ** 2))
        else:
            val_loss = float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss})
    return params, history


def _rl_gradient(policy, value_net, batch, idx, cfg: FinetuneConfig,
                 include_imitation: bool = True):
    """Combined-loss gradients for one minibatch of the rollout batch."""
    obs = batch["obs"][idx]
    p_grads, p_info = policy_mod.gradients(
        policy, obs, "ppo",
        actions=batch["actions"][idx],
        advantages=batch["advantages"][idx],
        old_log_probs=batch["old_log_probs"][idx],
        clip=cfg.clip,
        policy_coef=cfg.mix * cfg.policy_weight,
        entropy_coef=cfg.mix * cfg.entropy_weight)
    total = policy_mod.grads_axpy(None, p_grads, 1.0)
    i_info = {"loss": 0.0}
    if include_imitation:
        i_grads, i_info = policy_mod.gradients(
            policy, obs, "mse", targets=batch["targets"][idx])
        total = policy_mod.grads_axpy(total, i_grads, 1.0 - cfg.mix)

    v_grads, v_info = policy_mod.gradients(
        value_net, obs, "mse",
        targets=batch["returns"][idx][:, None])
    v_total = policy_mod.grads_axpy(None, v_grads, cfg.mix * cfg.value_weight)
    info = {"L_policy": p_info["policy_loss"],
            "L_imitation": i_info["loss"],
            "L_value": v_info["loss"]}
    return total, v_total, info


def finetune(policy: MlpParams, value_net: MlpParams, tracks,
             realtime: MpcConfig, cfg: FinetuneConfig, total_steps: int,
             seed: int = 0, time_mode: str = "iterations_proxy",
             teacher: Optional[MpcConfig] = None, progress: bool = False):
    """Phase 2: online fine-tuning against the fast early-stopping MPC.

    Every transition applies the first input of the fast MPC's refined
    solution (never the raw policy sample).  When `teacher` is given,
    the imitation targets come from a separate solve under that config
    on the visited states (the high-budget expert queried on the
    learner's own state distribution); otherwise the fast solution is
    its own target.  Returns (policy, value_net, metrics rows), one row
    per completed batch.
    """
    rng = np.random.default_rng(seed)
    spec = realtime.vehicle
    if cfg.exploration_log_std is not None:
        policy = policy.copy()
        policy.log_std = np.full_like(policy.log_std, cfg.exploration_log_std)
    p_state = policy_mod.AdamState.for_params(policy)
    v_state = policy_mod.AdamState.for_params(value_net)
    metrics = []
    lr = cfg.learning_rate
    divergence_strikes = 0
    baseline_xte = None

    track_cursor = 0
    episode_state = None
    steps_done = 0
    agg_obs, agg_targets = [], []
    while steps_done < total_steps:
        buffer = RolloutBuffer()
        ep_rewards, ep_iters, ep_xtes, planned = [], [], [], []
        batch_steps = min(cfg.steps_per_batch, total_steps - steps_done)
        while len(buffer) < batch_steps:
            if episode_state is None:
                track = tracks[track_cursor % len(tracks)]
                if cfg.start_indices is not None:
                    start = int(cfg.start_indices[
                        track_cursor % len(cfg.start_indices)]) % len(track)
                else:
                    start = 0
                track_cursor += 1
                state = _start_state(track, start, realtime.v_ref,
                                     rng, cfg.start_jitter)
                tracker = trackgeom.LapTracker(track, start)
                prev_input = ControlInput(0.0, 0.0)
                ep_steps = 0
                episode_state = (track, state, tracker, prev_input, ep_steps)
            track, state, tracker, prev_input, ep_steps = episode_state

            obs = policy_mod.observe(track, state, cfg.lookahead).vector()
            out = policy_mod.sample_action(policy, obs, rng)
            guess_vec = out.sample if cfg.guess_source == "sample" else out.mean
            guess = policy_mod.decode_action(
                np.clip(guess_vec, -1.0, 1.0), spec)
            solution = mpc.solve(track, state, realtime, WarmStartSource.POLICY,
                                 policy_guess=guess, prev_input=prev_input)
            reward = compute_reward(solution, time_mode)
            value = float(policy_mod.forward(value_net, obs)[0])
            if teacher is not None:
                # warm-start the teacher from the policy's own guess so the
                # refined target is never worse than the student's proposal
                t_sol = mpc.solve(track, state, teacher,
                                  WarmStartSource.POLICY, policy_guess=guess,
                                  prev_input=prev_input)
                target = policy_mod.normalize_action(t_sol.sequence, spec)
            else:
                target = policy_mod.normalize_action(solution.sequence, spec)

            u = solution.sequence[0]
            state = vehicle_step(state, u, spec)
            prev_input = u
            ep_steps += 1
            lap_done = tracker.update((state.x, state.y))
            done = (_off_track(track, state) or lap_done
                    or ep_steps >= cfg.max_episode_steps)
            buffer.append(obs, out.sample, out.log_prob, reward, value,
                          target, done)
            ep_rewards.append(reward)
            ep_iters.append(solution.iterations_used)
            ep_xtes.append(trackgeom.cross_track_error(track, (state.x, state.y)))
            planned.append(solution.planned_xte_sum)
            episode_state = None if done else (track, state, tracker,
                                               prev_input, ep_steps)
        if episode_state is not None:
            _, state, _, _, _ = episode_state
            next_obs = policy_mod.observe(episode_state[0], state,
                                          cfg.lookahead).vector()
            buffer.last_value = float(policy_mod.forward(value_net, next_obs)[0])
        steps_done += len(buffer)

        advantages, returns = gae_advantages(buffer, cfg.gamma, cfg.gae_lambda)
        batch = {
            "obs": np.stack(buffer.obs),
            "actions": np.stack(buffer.actions),
            "old_log_probs": np.asarray(buffer.log_probs),
            "advantages": advantages,
            "returns": returns,
            "targets": np.stack(buffer.targets),
        }
        if cfg.aggregate:
            agg_obs.append(batch["obs"])
            agg_targets.append(batch["targets"])
            obs_all = np.concatenate(agg_obs)
            tgt_all = np.concatenate(agg_targets)
        infos = []
        for _ in range(cfg.epochs):
            if cfg.mix > 0.0 or not cfg.aggregate:
                order = rng.permutation(len(buffer))
                for lo in range(0, len(order), cfg.minibatch_size):
                    idx = order[lo:lo + cfg.minibatch_size]
                    p_grads, v_grads, info = _rl_gradient(
                        policy, value_net, batch, idx, cfg,
                        include_imitation=not cfg.aggregate)
                    policy = policy_mod.adam_update(policy, p_grads,
                                                    p_state, lr)
                    value_net = policy_mod.adam_update(value_net, v_grads,
                                                       v_state, lr)
                    infos.append(info)
            if cfg.aggregate:
                # DAgger-style pass over the union of every batch collected
                # so far, so later batches cannot erode competence anchored
                # by earlier ones
                im_order = rng.permutation(len(tgt_all))
                for lo in range(0, len(im_order), cfg.minibatch_size):
                    idx = im_order[lo:lo + cfg.minibatch_size]
                    i_grads, i_info = policy_mod.gradients(
                        policy, obs_all[idx], "mse", targets=tgt_all[idx])
                    g = policy_mod.grads_axpy(None, i_grads, 1.0 - cfg.mix)
                    policy = policy_mod.adam_update(policy, g, p_state, lr)
                    infos.append({"L_policy": 0.0, "L_value": 0.0,
                                  "L_imitation": i_info["loss"]})
        mean_planned = float(np.mean(planned))
        if baseline_xte is None:
            baseline_xte = max(mean_planned, 1e-6)
        elif mean_planned > 5.0 * baseline_xte:
            divergence_strikes += 1
            lr *= 0.5
            logger.warning("divergence guard: mean planned xte %.3f > 5x "
                           "baseline %.3f; lr halved to %g",
                           mean_planned, baseline_xte, lr)
            if divergence_strikes >= 3:
                raise RuntimeError("fine-tuning diverged: 3 consecutive "
                                   "divergence-guard triggers")
        else:
            divergence_strikes = 0
        row = {
            "batch": len(metrics),
            "mean_reward": float(np.mean(ep_rewards)),
            "mean_iterations": float(np.mean(ep_iters)),
            "mean_xte": float(np.mean(ep_xtes)),
            "L_policy": float(np.mean([i["L_policy"] for i in infos])),
            "L_value": float(np.mean([i["L_value"] for i in infos])),
            "L_imitation": float(np.mean([i["L_imitation"] for i in infos])),
        }
        metrics.append(row)
        if progress:
            logger.info("batch %d: reward %.3f iters %.1f xte %.4f",
                        row["batch"], row["mean_reward"],
                        row["mean_iterations"], row["mean_xte"])
    return policy, value_net, metrics


def write_metrics_csv(metrics, sink) -> None:
    """Line-delimited comma-separated metrics log, one row per batch."""
    lines = [",".join(METRICS_COLUMNS)]
    for row in metrics:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in METRICS_COLUMNS))
    text = "\n".join(lines) + "\n"
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as fh:
            fh.write(text)
