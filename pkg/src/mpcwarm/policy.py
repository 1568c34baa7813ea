"""Warm-start policy and value networks: small MLPs with manual backprop.

The policy maps a pose-invariant observation (speed, heading error,
cross-track error and a window of lookahead waypoints in the vehicle
frame) to a normalized control sequence in [-1, 1]^2H via tanh-squashed
outputs.  A state-independent learnable log-std turns the mean into a
diagonal Gaussian for policy-gradient fine-tuning.  Everything is plain
float64 numpy; gradients are exact reverse-mode, checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import trackgeom
from .trackgeom import Track
from .vehicle import ControlSequence, VehicleSpec, VehicleState

FORMAT_VERSION = 1
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

# count of out-of-range components clamped by decode_action
clamp_warnings = 0


class PolicyIOError(ValueError):
    """Checkpoint cannot be parsed or is dimensionally inconsistent."""


@dataclass
class MlpParams:
    layer_dims: list
    weights: list  # weights[k]: (layer_dims[k], layer_dims[k+1])
    biases: list
    log_std: Optional[np.ndarray] = None
    output_activation: str = "tanh"  # "tanh" | "linear"

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("parameter count inconsistent with layer_dims")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k} shape mismatch")
        if self.log_std is not None and self.log_std.shape != (dims[-1],):
            raise ValueError("log_std dimension mismatch")
        if self.output_activation not in ("tanh", "linear"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.log_std is None else self.log_std.copy(),
            self.output_activation,
        )


@dataclass
class MlpGrads:
    weights: list
    biases: list
    log_std: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Observation:
    v: float
    yaw_error: float
    xte: float
    lookahead: np.ndarray  # (K, 2) waypoints in the vehicle frame

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.v, self.yaw_error, self.xte],
                               self.lookahead.reshape(-1)])


@dataclass(frozen=True)
class PolicyOutput:
    mean: np.ndarray
    sample: np.ndarray  # raw Gaussian sample (may exceed [-1, 1])
    log_prob: float


def init_mlp(layer_dims, rng: np.random.Generator,
             output_activation: str = "tanh",
             with_log_std: bool = False,
             log_std_init: float = -1.0) -> MlpParams:
    """He-initialized MLP parameters."""
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    log_std = np.full(layer_dims[-1], log_std_init) if with_log_std else None
    return MlpParams(list(layer_dims), weights, biases, log_std, output_activation)


def init_policy(obs_dim: int, horizon: int, rng: np.random.Generator,
                hidden=(64, 64), output_scale: float = 0.01) -> MlpParams:
    """Warm-start policy network; the output layer is scaled down so the
    initial mean is near zero (solution sequences are small in normalized
    units, and a large random head dominates early supervised training)."""
    params = init_mlp([obs_dim, *hidden, 2 * horizon], rng,
                      output_activation="tanh", with_log_std=True)
    params.weights[-1] = params.weights[-1] * output_scale
    return params


def init_value(obs_dim: int, rng: np.random.Generator,
               hidden=(64, 64)) -> MlpParams:
    return init_mlp([obs_dim, *hidden, 1], rng, output_activation="linear")


def observe(track: Track, state: VehicleState, k: int = 10) -> Observation:
    """Pose-invariant observation of the vehicle relative to the path.

    The lookahead is the K waypoints after the nearest one, rotated and
    translated into the vehicle frame.
    """
    pos = (state.x, state.y)
    i = trackgeom.nearest_waypoint_index(track, pos)
    n = len(track)
    idx = (i + 1 + np.arange(k)) % n
    rel = track.xy[idx] - np.array(pos)
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    rot = np.array([[c, s], [-s, c]])
    return Observation(
        v=state.v,
        yaw_error=trackgeom.heading_error(track, pos, state.yaw),
        xte=trackgeom.cross_track_error(track, pos),
        lookahead=rel @ rot.T,
    )


def _forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass keeping per-layer activations for backprop."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if k < last:
            h = np.maximum(z, 0.0)
        elif params.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
        acts.append(h)
    return h, acts


def forward(params: MlpParams, obs) -> np.ndarray:
    """Deterministic network output for one observation or a batch."""
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != params.input_dim:
        raise ValueError(
            f"observation dim {x.shape[-1]} != input dim {params.input_dim}")
    y, _ = _forward_cached(params, x[None, :] if single else x)
    return y[0] if single else y


def backprop(params: MlpParams, acts: list, d_out: np.ndarray) -> MlpGrads:
    """Reverse-mode gradients given d(loss)/d(network output)."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    last = len(params.weights) - 1
    if params.output_activation == "tanh":
        delta = d_out * (1.0 - acts[-1] ** 2)
    else:
        delta = d_out
    for k in range(last, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0.0)
    return MlpGrads(grads_w, grads_b)


def _gaussian_log_prob(actions, mean, log_std):
    var = np.exp(2.0 * log_std)
    diff = actions - mean
    return np.sum(-0.5 * diff * diff / var - log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob(params: MlpParams, obs, actions) -> np.ndarray:
    """Log-density of raw actions under the current diagonal Gaussian."""
    if params.log_std is None:
        raise ValueError("network has no stochastic head")
    mean = forward(params, obs)
    return _gaussian_log_prob(np.asarray(actions, float), mean, params.log_std)


def entropy(params: MlpParams) -> float:
    """Closed-form entropy of the state-independent diagonal Gaussian."""
    if params.log_std is None:
        raise ValueError("network has no stochastic head")
    return float(np.sum(params.log_std + 0.5 * (LOG_2PI + 1.0)))


def sample_action(params: MlpParams, obs, rng: np.random.Generator) -> PolicyOutput:
    """Draw a raw action from the Gaussian head; log_prob of the raw draw."""
    mean = forward(params, obs)
    std = np.exp(params.log_std)
    sample = mean + std * rng.standard_normal(mean.shape)
    lp = float(_gaussian_log_prob(sample, mean, params.log_std))
    return PolicyOutput(mean=mean, sample=sample, log_prob=lp)


def gradients(params: MlpParams, obs_batch, loss_kind: str, *,
              targets=None, actions=None, advantages=None,
              old_log_probs=None, clip: float = 0.2,
              policy_coef: float = 1.0, entropy_coef: float = 0.0):
    """Exact gradients of a scalar training loss over a batch.

    loss_kind "mse": mean over batch and output dims of the squared error
    against `targets` (behavior cloning / value regression).

    loss_kind "ppo": policy_coef * clipped-surrogate policy loss plus
    entropy_coef * negated Gaussian entropy, using `actions`,
    `advantages` and `old_log_probs` from the rollout buffer.

    Returns (MlpGrads, info dict with the component losses).
    """
    x = np.atleast_2d(np.asarray(obs_batch, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y, acts = _forward_cached(params, x)
    b = x.shape[0]

    if loss_kind == "mse":
        t = np.atleast_2d(np.asarray(targets, dtype=float))
        diff = y - t
        loss = float(np.mean(diff * diff))
        d_out = 2.0 * diff / diff.size
        grads = backprop(params, acts, d_out)
        if params.log_std is not None:
            grads.log_std = np.zeros_like(params.log_std)
        return grads, {"loss": loss}

    if loss_kind == "ppo":
        if params.log_std is None:
            raise ValueError("ppo loss needs a stochastic head")
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        adv = np.asarray(advantages, dtype=float)
        old_lp = np.asarray(old_log_probs, dtype=float)
        log_std = params.log_std
        var = np.exp(2.0 * log_std)
        diff = a - y
        new_lp = _gaussian_log_prob(a, y, log_std)
        ratio = np.exp(new_lp - old_lp)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
        surrogate = np.minimum(unclipped, clipped)
        l_policy = -float(np.mean(surrogate))
        l_entropy = -entropy(params)

        # d surrogate / d log-ratio is the unclipped branch value where it
        # is active and zero where the clipped branch is strictly better.
        active = unclipped <= clipped
        d_lp = np.where(active, -unclipped, 0.0) / b * policy_coef
        d_mean = d_lp[:, None] * (diff / var)
        grads = backprop(params, acts, d_mean)
        d_log_std = (d_lp[:, None] * (diff * diff / var - 1.0)).sum(axis=0)
        d_log_std += -entropy_coef * np.ones_like(log_std)
        grads.log_std = d_log_std
        return grads, {"policy_loss": l_policy, "entropy_loss": l_entropy}

    raise ValueError(f"unknown loss kind {loss_kind!r}")


def grads_axpy(total: Optional[MlpGrads], grads: MlpGrads,
               scale: float) -> MlpGrads:
    """total += scale * grads (total may be None to start)."""
    if total is None:
        total = MlpGrads(
            [scale * w for w in grads.weights],
            [scale * b for b in grads.biases],
            None if grads.log_std is None else scale * grads.log_std,
        )
        return total
    for tw, gw in zip(total.weights, grads.weights):
        tw += scale * gw
    for tb, gb in zip(total.biases, grads.biases):
        tb += scale * gb
    if grads.log_std is not None:
        if total.log_std is None:
            total.log_std = scale * grads.log_std
        else:
            total.log_std += scale * grads.log_std
    return total


@dataclass
class AdamState:
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)
    m_s: Optional[np.ndarray] = None
    v_s: Optional[np.ndarray] = None
    t: int = 0

    @classmethod
    def for_params(cls, params: MlpParams) -> "AdamState":
        state = cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
        )
        if params.log_std is not None:
            state.m_s = np.zeros_like(params.log_std)
            state.v_s = np.zeros_like(params.log_std)
        return state


def _adam_step(p, g, m, v, lr, t, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_update(params: MlpParams, grads: MlpGrads, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> MlpParams:
    """One bias-corrected adaptive-moment step; returns new parameters."""
    state.t += 1
    t = state.t
    new = params.copy()
    for k in range(len(new.weights)):
        new.weights[k] = _adam_step(params.weights[k], grads.weights[k],
                                    state.m_w[k], state.v_w[k], lr, t,
                                    beta1, beta2, eps)
        new.biases[k] = _adam_step(params.biases[k], grads.biases[k],
                                   state.m_b[k], state.v_b[k], lr, t,
                                   beta1, beta2, eps)
    if new.log_std is not None and grads.log_std is not None:
        new.log_std = np.clip(
            _adam_step(params.log_std, grads.log_std, state.m_s, state.v_s,
                       lr, t, beta1, beta2, eps),
            LOG_STD_MIN, LOG_STD_MAX)
    return new


def save(params: MlpParams, sink) -> None:
    """Write a self-describing versioned checkpoint (JSON text)."""
    doc = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(params.layer_dims),
        "output_activation": params.output_activation,
        "weights": [w.reshape(-1).tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "log_std": None if params.log_std is None else params.log_std.tolist(),
    }
    if hasattr(sink, "write"):
        json.dump(doc, sink)
    else:
        with open(sink, "w") as fh:
            json.dump(doc, fh)


def load(source) -> MlpParams:
    """Inverse of save; round-trips parameters bit-exactly."""
    try:
        if hasattr(source, "read"):
            doc = json.load(source)
        else:
            with open(source) as fh:
                doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PolicyIOError(f"unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyIOError("checkpoint is not a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise PolicyIOError(f"unsupported checkpoint version: {version}")
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        weights = [np.array(w, dtype=float).reshape(d_in, d_out)
                   for w, d_in, d_out in zip(doc["weights"], dims[:-1], dims[1:])]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        log_std = doc.get("log_std")
        log_std = None if log_std is None else np.array(log_std, dtype=float)
        return MlpParams(dims, weights, biases, log_std,
                         doc.get("output_activation", "tanh"))
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyIOError(f"inconsistent checkpoint: {exc}") from exc


def decode_action(normalized: np.ndarray, spec: VehicleSpec) -> ControlSequence:
    """Map a normalized 2H vector onto bounded (accel, steer) controls.

    Out-of-range components are clamped; the module-level clamp_warnings
    counter records how many.
    """
    global clamp_warnings
    u = np.asarray(normalized, dtype=float)
    if u.ndim != 1 or u.shape[0] % 2 != 0:
        raise ValueError("normalized action must be a flat 2H vector")
    h = u.shape[0] // 2
    out_of_range = int(np.sum((u < -1.0) | (u > 1.0)))
    if out_of_range:
        clamp_warnings += out_of_range
        u = np.clip(u, -1.0, 1.0)
    bounds = spec.bounds_array(h)
    lo, hi = bounds[:, 0], bounds[:, 1]
    phys = 0.5 * (u * (hi - lo) + hi + lo)
    return ControlSequence.from_array(phys.reshape(h, 2))


def normalize_action(seq: ControlSequence, spec: VehicleSpec) -> np.ndarray:
    """Inverse of decode_action for in-bounds control sequences."""
    arr = seq.as_array().reshape(-1)
    bounds = spec.bounds_array(len(seq))
    lo, hi = bounds[:, 0], bounds[:, 1]
    return (2.0 * arr - (hi + lo)) / (hi - lo)
