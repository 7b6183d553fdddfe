"""TD3 with a behavior-cloning term in the actor loss (TD3+BC).

The actor minimises

    -lambda * mean(Q1(s, pi(s))) + mean(||pi(s) - a||^2),
    lambda = alpha / mean(|Q1(s, a)|)

where the mean in lambda runs over the current mini-batch at the dataset
actions and is treated as a constant. ``use_q_term=False`` turns the update
into plain behavior cloning; ``use_bc_term=False`` leaves lambda-scaled TD3.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .datasets import Batch, NormalizationStats, OfflineDataset, apply_normalization, sample_minibatch
from .envs import EnvSpec
from .errors import ContractError, NumericError, ShapeError
from .nn import AdamState, Mlp, adam_step, backward_cached, forward_cached, mlp_forward, mlp_init

DESK_HIDDEN = (64, 64)
PAPER_HIDDEN = (256, 256)


@dataclass(frozen=True)
class Td3bcConfig:
    alpha: float = 2.5
    discount: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden_sizes: tuple = DESK_HIDDEN
    use_bc_term: bool = True
    use_q_term: bool = True
    use_state_norm: bool = True
    lambda_floor: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.policy_freq < 1 or self.noise_clip < 0 or self.batch_size < 1:
            raise ValueError("policy_freq and batch_size must be >= 1, noise_clip >= 0")
        if not (self.use_bc_term or self.use_q_term):
            raise ValueError("at least one of use_bc_term / use_q_term must be on")

    @classmethod
    def paper_parity(cls, **overrides):
        return cls(**{"hidden_sizes": PAPER_HIDDEN, **overrides})

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainState:
    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    actor_target: Mlp
    critic1_target: Mlp
    critic2_target: Mlp
    actor_opt: AdamState
    critic1_opt: AdamState
    critic2_opt: AdamState
    action_low: np.ndarray
    action_high: np.ndarray
    step_count: int = 0
    actor_updates: int = 0

    @property
    def obs_dim(self):
        return self.actor.layer_sizes[0]

    @property
    def act_dim(self):
        return self.actor.layer_sizes[-1]

    @property
    def action_scale(self):
        return 0.5 * (self.action_high - self.action_low)

    @property
    def action_center(self):
        return 0.5 * (self.action_high + self.action_low)

    def networks(self):
        return {name: getattr(self, name) for name in NETWORKS}

    def optimizers(self):
        return {name: getattr(self, name) for name in OPTIMIZERS}


NETWORKS = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")
OPTIMIZERS = ("actor_opt", "critic1_opt", "critic2_opt")


@dataclass
class LossReport:
    critic_loss: float | None
    actor_loss: float | None = None
    lambda_value: float | None = None
    mean_abs_q: float | None = None


def agent_init(env_spec: EnvSpec, config: Td3bcConfig, seed) -> TrainState:
    """Fresh actor and twin critics; targets start as exact copies."""
    obs, act = env_spec.obs_dim, env_spec.act_dim
    if len(env_spec.action_low) != act or len(env_spec.action_high) != act:
        raise ValueError("action bounds disagree with act_dim")
    seeds = np.random.SeedSequence(seed).generate_state(3)
    hidden = list(config.hidden_sizes)
    actor = mlp_init([obs, *hidden, act], "tanh", int(seeds[0]))
    c1 = mlp_init([obs + act, *hidden, 1], "identity", int(seeds[1]))
    c2 = mlp_init([obs + act, *hidden, 1], "identity", int(seeds[2]))
    return TrainState(
        actor, c1, c2, actor.copy(), c1.copy(), c2.copy(),
        AdamState.zeros(actor.n_params, config.actor_lr),
        AdamState.zeros(c1.n_params, config.critic_lr),
        AdamState.zeros(c2.n_params, config.critic_lr),
        np.asarray(env_spec.action_low, dtype=np.float64),
        np.asarray(env_spec.action_high, dtype=np.float64),
    )


def policy_actions(state: TrainState, states, target=False):
    net = state.actor_target if target else state.actor
    return state.action_center + state.action_scale * mlp_forward(net, states)


def target_components(batch: Batch, state: TrainState, config: Td3bcConfig, rng):
    """Smoothed target action, both target-critic values and the bootstrap target."""
    s2 = batch.next_states
    noise = rng.normal(0.0, config.policy_noise, size=(len(s2), state.act_dim))
    noise = np.clip(noise, -config.noise_clip, config.noise_clip) * state.action_scale
    next_action = np.clip(policy_actions(state, s2, target=True) + noise,
                          state.action_low, state.action_high)
    sa2 = np.hstack([s2, next_action])
    q1 = mlp_forward(state.critic1_target, sa2)[:, 0]
    q2 = mlp_forward(state.critic2_target, sa2)[:, 0]
    y = batch.rewards + config.discount * batch.not_done * np.minimum(q1, q2)
    return {"y": y, "q1": q1, "q2": q2, "noise": noise, "next_action": next_action}


def compute_target(batch: Batch, state: TrainState, config: Td3bcConfig, rng):
    return target_components(batch, state, config, rng)["y"]


def _critic_step(state, batch, target):
    sa = np.hstack([batch.states, batch.actions])
    n = len(sa)
    updates = {}
    loss = 0.0
    q1 = None
    for name in ("critic1", "critic2"):
        net, opt = getattr(state, name), getattr(state, name + "_opt")
        q, cache = forward_cached(net, sa)
        err = q[:, 0] - target
        loss += float(np.mean(err * err))
        if not np.isfinite(loss):
            raise NumericError(f"critic loss is {loss} at step {state.step_count}",
                               step=state.step_count)
        grads = backward_cached(net, cache, (2.0 / n) * err[:, None])
        try:
            flat, opt = adam_step(net.flat, grads.flat, opt, net.layer_offsets)
        except NumericError as exc:
            exc.step = state.step_count
            raise
        updates[name] = net.with_params(flat)
        updates[name + "_opt"] = opt
        if q1 is None:
            q1 = q[:, 0]
    return replace(state, **updates), loss, q1


def critic_update(state: TrainState, batch: Batch, config: Td3bcConfig, target):
    """One Adam step on each critic towards the precomputed ``target``.

    Loss is ``mean((Q1 - y)^2) + mean((Q2 - y)^2)``.
    """
    new, loss, _ = _critic_step(state, batch, np.asarray(target, dtype=np.float64))
    return new, loss


def compute_lambda(q_values, alpha, lambda_floor=1e-8):
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ValueError("need at least one Q value")
    return alpha / max(float(np.mean(np.abs(q))), lambda_floor)


def actor_objective(state: TrainState, batch: Batch, config: Td3bcConfig, lam=None):
    """Actor loss, its flat parameter gradient and the lambda used.

    ``lam`` overrides the batch estimate; gradients never flow into lambda
    nor into the critic parameters.
    """
    s, a = batch.states, batch.actions
    n = len(s)
    out, actor_cache = forward_cached(state.actor, s)
    pi = state.action_center + state.action_scale * out
    d_pi = np.zeros_like(pi)
    loss = 0.0
    if config.use_q_term:
        if lam is None:
            q_data = mlp_forward(state.critic1, np.hstack([s, a]))
            lam = compute_lambda(q_data, config.alpha, config.lambda_floor)
        q_pi, critic_cache = forward_cached(state.critic1, np.hstack([s, pi]))
        loss -= lam * float(np.mean(q_pi))
        up = np.full_like(q_pi, -lam / n)
        d_pi += backward_cached(state.critic1, critic_cache, up, param_grads=False) \
            .input_grads[:, state.obs_dim:]
    else:
        lam = None
    if config.use_bc_term:
        diff = pi - a
        loss += float(np.mean(np.sum(diff * diff, axis=1)))
        d_pi += (2.0 / n) * diff
    grads = backward_cached(state.actor, actor_cache, d_pi * state.action_scale)
    return loss, grads.flat, lam


def actor_update(state: TrainState, batch: Batch, config: Td3bcConfig):
    """One Adam step on the actor; returns ``(state, actor_loss, lambda)``."""
    if state.step_count % config.policy_freq != 0:
        raise ContractError(
            f"actor update at step {state.step_count} with policy_freq {config.policy_freq}"
        )
    loss, grad, lam = actor_objective(state, batch, config)
    if not np.isfinite(loss):
        raise NumericError(f"actor loss is {loss} at step {state.step_count}",
                           step=state.step_count)
    try:
        flat, opt = adam_step(state.actor.flat, grad, state.actor_opt, state.actor.layer_offsets)
    except NumericError as exc:
        exc.step = state.step_count
        raise
    new = replace(state, actor=state.actor.with_params(flat), actor_opt=opt,
                  actor_updates=state.actor_updates + 1)
    return new, loss, lam


def soft_update_targets(state: TrainState, tau) -> TrainState:
    """Polyak averaging ``target <- tau * source + (1 - tau) * target``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    updates = {}
    for name in ("actor", "critic1", "critic2"):
        src, tgt = getattr(state, name), getattr(state, name + "_target")
        updates[name + "_target"] = tgt.with_params(tau * src.flat + (1.0 - tau) * tgt.flat)
    return replace(state, **updates)


def train_step(state: TrainState, dataset: OfflineDataset, config: Td3bcConfig, rng):
    """Sample a batch, update critics, and on every ``policy_freq``-th step
    update the actor and the targets.

    The behavior-cloning arm (``use_q_term=False``) never reads a critic, so
    critics are not trained there and the report carries ``None`` for them.
    """
    if dataset.normalized != config.use_state_norm:
        raise ContractError("dataset normalization does not match use_state_norm")
    batch = sample_minibatch(dataset, config.batch_size, rng)
    report = LossReport(None)
    if config.use_q_term:
        y = compute_target(batch, state, config, rng)
        state, report.critic_loss, q1 = _critic_step(state, batch, y)
        report.mean_abs_q = float(np.mean(np.abs(q1)))
    if state.step_count % config.policy_freq == 0:
        state, report.actor_loss, report.lambda_value = actor_update(state, batch, config)
        state = soft_update_targets(state, config.tau)
    return replace(state, step_count=state.step_count + 1), report


def select_action(state: TrainState, raw_observation, stats: NormalizationStats | None = None):
    """Deterministic action for a raw observation (vector or batch)."""
    obs = np.asarray(raw_observation, dtype=np.float64)
    single = obs.ndim == 1
    obs = np.atleast_2d(obs)
    if obs.shape[1] != state.obs_dim:
        raise ShapeError(f"observation has {obs.shape[1]} features, actor expects {state.obs_dim}")
    if stats is not None:
        obs = apply_normalization(obs, stats)
    action = np.clip(policy_actions(state, obs), state.action_low, state.action_high)
    return action[0] if single else action


@dataclass
class PolicySnapshot:
    """Frozen copy of the actor usable as ``observation -> action``."""

    actor: Mlp
    action_low: np.ndarray
    action_high: np.ndarray
    stats: NormalizationStats | None = None

    @classmethod
    def of(cls, state: TrainState, stats=None):
        return cls(state.actor.copy(), state.action_low.copy(), state.action_high.copy(), stats)

    def __call__(self, observation):
        obs = np.asarray(observation, dtype=np.float64)
        if self.stats is not None:
            obs = apply_normalization(obs, self.stats)
        center = 0.5 * (self.action_high + self.action_low)
        scale = 0.5 * (self.action_high - self.action_low)
        out = mlp_forward(self.actor, obs[None, :])[0]
        return np.clip(center + scale * out, self.action_low, self.action_high)


def value_divergence(mean_abs_q, max_abs_return, factor=5.0):
    """True when the critic's mean |Q| exceeds ``factor`` times the largest
    |return| the environment can produce, a sign that lambda is too large
    for this dataset (Q extrapolating without support)."""
    return mean_abs_q is not None and mean_abs_q > factor * max_abs_return
