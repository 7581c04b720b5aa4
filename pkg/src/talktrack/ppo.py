"""Clipped-surrogate policy optimization with GAE and masked softmax policies.

The policy head produces one logit per catalog action; blocked actions are
excluded from the softmax (probability exactly zero), so sampling, log
probabilities, entropy, and gradients all live on the allowed set only.
The objective ascends  mean(L_clip) + beta * mean(H) - value_coef *
mean((V - R)^2)  with the probability ratio exp(new_lp - old_lp); setting
``gae_lambda=0`` reduces the advantage estimator to the plain one-step TD
residual  r_t + gamma * V(s_{t+1}) - V(s_t).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .artifact import PolicyArtifact
from .compliance import ComplianceMonitor, ComplianceRule, mask_actions
from .dialogue import ActionCatalog, EncoderConfig, encode_values
from .env import DialogueEnv, ScenarioSpec, StepOutcome
from .errors import ConfigError, DivergenceError
from .nn import (
    Mlp,
    backward,
    forward,
    init_mlp,
    make_optimizer,
    masked_log_softmax,
    optimizer_step,
)

# Hook deciding the reward of a collected step. Receives the encoding, the
# action mask, the masked log-probabilities, the chosen action, and the
# environment outcome; RLHF fine-tuning swaps in a reward-model score here
# and never touches outcome.reward.
RewardHook = Callable[[np.ndarray, np.ndarray, np.ndarray, int, StepOutcome], float]


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 1.0
    gae_lambda: float = 0.97
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.15
    value_coef: float = 0.5
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    rollout_episodes: int = 64
    num_iterations: int = 200
    learning_rate: float = 3e-3
    hidden_sizes: tuple[int, ...] = (64, 64)
    normalize_advantages: bool = True
    # Keeps the displayed objective's entropy sign (a penalty) instead of the
    # standard exploration bonus; off by default.
    literal_entropy_sign: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ConfigError("clip_epsilon must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("entropy_coef and value_coef must be >= 0")
        if self.epochs_per_batch < 1 or self.minibatch_size < 1:
            raise ConfigError("epochs_per_batch and minibatch_size must be >= 1")
        if self.rollout_episodes < 1 or self.num_iterations < 0:
            raise ConfigError("rollout_episodes >= 1 and num_iterations >= 0 required")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class RolloutBatch:
    state_enc: np.ndarray  # (T, D)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    old_log_probs: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    masks: np.ndarray  # (T, A) bool
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


def collect_rollout(
    policy_net: Mlp,
    value_net: Mlp,
    env: DialogueEnv,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    encoder: EncoderConfig,
    episodes: int,
    rng: np.random.Generator,
    aggregate: bool = False,
    reward_hook: RewardHook | None = None,
    monitor: ComplianceMonitor | None = None,
    segment_offset: int = 0,
) -> RolloutBatch:
    """Run ``episodes`` episodes under the current stochastic policy,
    cycling segments, and record everything the update needs."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    n_actions = len(catalog)
    segments = sorted(env.spec.segments)
    step_env = env.step_aggregate if aggregate else env.step
    encs, actions, rewards, old_lps, values, dones, masks = [], [], [], [], [], [], []
    episode_returns = []
    for episode in range(episodes):
        state = env.reset(segments[(segment_offset + episode) % len(segments)])
        ep_return = 0.0
        while True:
            enc = encode_values(state, encoder)
            eligible = set(env.eligible_indices(state))
            mask = np.zeros(n_actions, dtype=bool)
            mask[[i for i in mask_actions(catalog, state, rules) if i in eligible]] = True
            logits, _ = forward(policy_net, enc)
            log_probs = masked_log_softmax(logits, mask)
            action = _sample_masked(log_probs, mask, rng)
            if monitor is not None:
                monitor.verify_executed(catalog[action], state)
            value, _ = forward(value_net, enc)
            outcome = step_env(state, catalog[action].id)
            if reward_hook is None:
                reward = outcome.reward
            else:
                reward = reward_hook(enc, mask, log_probs, action, outcome)
            encs.append(enc)
            actions.append(action)
            rewards.append(reward)
            old_lps.append(log_probs[action])
            values.append(float(value[0]))
            dones.append(outcome.done)
            masks.append(mask)
            ep_return += reward
            if outcome.done:
                break
            state = outcome.next_state
        episode_returns.append(ep_return)
    return RolloutBatch(
        state_enc=np.stack(encs),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards),
        old_log_probs=np.array(old_lps),
        values=np.array(values),
        dones=np.array(dones, dtype=bool),
        masks=np.stack(masks),
        episode_returns=episode_returns,
    )


def _sample_masked(log_probs: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    acc = 0.0
    allowed = np.flatnonzero(mask)
    for a in allowed:
        acc += np.exp(log_probs[a])
        if u < acc:
            return int(a)
    return int(allowed[-1])


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over concatenated episodes.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t), and
    A_t sums (gamma * lambda)^l delta_{t+l} within the episode. With
    gae_lambda = 0 this is exactly the one-step advantage
    r_t + gamma * V(s_{t+1}) - V(s_t). Returns (advantages, returns) with
    returns_t = A_t + V(s_t), the value-regression target.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values, dones must have equal lengths")
    n = len(rewards)
    advantages = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        next_value = 0.0 if (dones[t] or t + 1 == n) else values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * gae_lambda * (0.0 if dones[t] else gae)
        advantages[t] = gae
    return advantages, advantages + values


def clipped_objective(ratio, advantage, clip_epsilon: float):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage
    return np.minimum(ratio * advantage, clipped)


def ppo_objective(
    policy_net: Mlp,
    value_net: Mlp,
    batch: RolloutBatch,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    indices: np.ndarray | None = None,
) -> float:
    """Scalar objective J on (a subset of) the batch; the quantity
    ppo_update ascends. Kept as a pure function so tests can difference it."""
    idx = np.arange(len(batch)) if indices is None else indices
    logits, _ = forward(policy_net, batch.state_enc[idx])
    log_probs = masked_log_softmax(logits, batch.masks[idx])
    new_lp = log_probs[np.arange(len(idx)), batch.actions[idx]]
    ratio = np.exp(new_lp - batch.old_log_probs[idx])
    l_clip = clipped_objective(ratio, advantages[idx], cfg.clip_epsilon).mean()
    probs = np.where(batch.masks[idx], np.exp(log_probs), 0.0)
    safe_lp = np.where(batch.masks[idx], log_probs, 0.0)
    entropy = -(probs * safe_lp).sum(axis=1).mean()
    values, _ = forward(value_net, batch.state_enc[idx])
    value_loss = np.mean((values[:, 0] - returns[idx]) ** 2)
    entropy_sign = -1.0 if cfg.literal_entropy_sign else 1.0
    return float(l_clip + cfg.entropy_coef * entropy_sign * entropy - cfg.value_coef * value_loss)


def ppo_update(
    policy_net: Mlp,
    value_net: Mlp,
    batch: RolloutBatch,
    cfg: PpoConfig,
    opt_policy,
    opt_value,
    rng: np.random.Generator,
) -> dict:
    """K epochs of minibatch ascent on the clipped objective.

    Advantages are normalized once per batch (mean 0, std 1, std floored at
    1e-8) unless disabled. Returns loss components for the metrics stream.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    advantages, returns = compute_gae(
        batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda
    )
    if cfg.normalize_advantages:
        advantages = (advantages - advantages.mean()) / max(advantages.std(), 1e-8)
    n = len(batch)
    entropy_sign = -1.0 if cfg.literal_entropy_sign else 1.0
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start : start + cfg.minibatch_size]
            m = len(idx)
            logits, cache_p = forward(policy_net, batch.state_enc[idx])
            mask = batch.masks[idx]
            log_probs = masked_log_softmax(logits, mask)
            probs = np.where(mask, np.exp(log_probs), 0.0)
            rows = np.arange(m)
            acts = batch.actions[idx]
            new_lp = log_probs[rows, acts]
            ratio = np.exp(new_lp - batch.old_log_probs[idx])
            adv = advantages[idx]

            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv
            use_unclipped = unclipped <= clipped
            # d(L_clip)/d(new_lp): ratio * A on the unclipped branch, else 0
            # (the clip is flat there).
            d_lp = np.where(use_unclipped, unclipped, 0.0) / m

            # d(new_lp)/d(logits) = onehot - probs, rows with allowed support.
            d_logits = -probs * d_lp[:, None]
            d_logits[rows, acts] += d_lp

            # entropy term: dH/dz_j = -p_j (log p_j + H)
            safe_lp = np.where(mask, log_probs, 0.0)
            entropy = -(probs * safe_lp).sum(axis=1)
            d_entropy = -probs * (safe_lp + entropy[:, None])
            d_logits += (cfg.entropy_coef * entropy_sign / m) * d_entropy

            loss = float(-(np.where(use_unclipped, unclipped, clipped).mean()))
            if not np.isfinite(loss):
                raise DivergenceError("PPO policy loss diverged")
            grads_p = backward(policy_net, cache_p, -d_logits)  # minimize -J
            optimizer_step(policy_net, grads_p, opt_policy)

            values, cache_v = forward(value_net, batch.state_enc[idx])
            err = values[:, 0] - returns[idx]
            if not np.all(np.isfinite(err)):
                raise DivergenceError("PPO value loss diverged")
            d_values = (cfg.value_coef * 2.0 * err / m)[:, None]
            grads_v = backward(value_net, cache_v, d_values)
            optimizer_step(value_net, grads_v, opt_value)

    # Post-update diagnostics on the full batch.
    logits, _ = forward(policy_net, batch.state_enc)
    log_probs = masked_log_softmax(logits, batch.masks)
    new_lp = log_probs[np.arange(n), batch.actions]
    ratio = np.exp(new_lp - batch.old_log_probs)
    l_clip = clipped_objective(ratio, advantages, cfg.clip_epsilon).mean()
    probs = np.where(batch.masks, np.exp(log_probs), 0.0)
    safe_lp = np.where(batch.masks, log_probs, 0.0)
    entropy = float(-(probs * safe_lp).sum(axis=1).mean())
    values, _ = forward(value_net, batch.state_enc)
    value_loss = float(np.mean((values[:, 0] - returns) ** 2))
    kl_estimate = float(np.mean((ratio - 1.0) - np.log(ratio)))
    return {
        "l_clip": float(l_clip),
        "entropy": entropy,
        "value_loss": value_loss,
        "kl_estimate": kl_estimate,
    }


def run_ppo(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    cfg: PpoConfig,
    encoder: EncoderConfig,
    seed: int,
    aggregate: bool = False,
    monitor: ComplianceMonitor | None = None,
    policy_init: Mlp | None = None,
    reward_hook: RewardHook | None = None,
    algo_name: str = "ppo",
) -> tuple[PolicyArtifact, list[dict]]:
    """Alternate rollout collection and clipped-surrogate updates."""
    agent_rng = np.random.default_rng([seed, 0])
    env = DialogueEnv(spec, catalog, seed=[seed, 1])
    monitor = monitor if monitor is not None else ComplianceMonitor(rules)
    dims = [encoder.dimension, *cfg.hidden_sizes, len(catalog)]
    policy_net = policy_init.copy() if policy_init is not None else init_mlp(dims, agent_rng)
    value_net = init_mlp([encoder.dimension, *cfg.hidden_sizes, 1], agent_rng)
    # Zero value head: V starts at exactly 0, so first-iteration advantages
    # carry no initialization noise (and are exactly zero under constant
    # rewards of zero, where the normalization guard then keeps them zero).
    value_net.weights[-1][:] = 0.0
    value_net.biases[-1][:] = 0.0
    opt_policy = make_optimizer("adam", cfg.learning_rate)
    opt_value = make_optimizer("adam", cfg.learning_rate)
    metrics = []
    for iteration in range(cfg.num_iterations):
        batch = collect_rollout(
            policy_net,
            value_net,
            env,
            catalog,
            rules,
            encoder,
            cfg.rollout_episodes,
            agent_rng,
            aggregate=aggregate,
            reward_hook=reward_hook,
            monitor=monitor,
            segment_offset=iteration * cfg.rollout_episodes,
        )
        stats = ppo_update(policy_net, value_net, batch, cfg, opt_policy, opt_value, agent_rng)
        metrics.append(
            {
                "iteration": iteration,
                "mean_return": float(np.mean(batch.episode_returns)),
                **stats,
            }
        )
    artifact = PolicyArtifact(
        algo=algo_name,
        encoder=encoder,
        catalog_ids=catalog.ids,
        networks={"policy": policy_net, "value": value_net},
        config=asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes)},
        seed=seed,
        meta={
            "iterations": cfg.num_iterations,
            "env_rng_draws": env.rng_draws,
            "compliance_violations": monitor.violations,
        },
    )
    return artifact, metrics


class PpoAgent(BaseEstimator):
    """Estimator wrapper around :func:`run_ppo`."""

    def __init__(
        self,
        gamma: float = 1.0,
        gae_lambda: float = 0.97,
        clip_epsilon: float = 0.2,
        entropy_coef: float = 0.15,
        value_coef: float = 0.5,
        epochs_per_batch: int = 4,
        minibatch_size: int = 64,
        rollout_episodes: int = 64,
        num_iterations: int = 200,
        learning_rate: float = 3e-3,
        hidden_sizes: tuple[int, ...] = (64, 64),
        normalize_advantages: bool = True,
        literal_entropy_sign: bool = False,
        encoder_dimension: int = 32,
        encoder_version: str = "1",
        seed: int = 0,
    ):
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_epsilon = clip_epsilon
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.epochs_per_batch = epochs_per_batch
        self.minibatch_size = minibatch_size
        self.rollout_episodes = rollout_episodes
        self.num_iterations = num_iterations
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.normalize_advantages = normalize_advantages
        self.literal_entropy_sign = literal_entropy_sign
        self.encoder_dimension = encoder_dimension
        self.encoder_version = encoder_version
        self.seed = seed

    def _config(self) -> PpoConfig:
        return PpoConfig(
            gamma=self.gamma,
            gae_lambda=self.gae_lambda,
            clip_epsilon=self.clip_epsilon,
            entropy_coef=self.entropy_coef,
            value_coef=self.value_coef,
            epochs_per_batch=self.epochs_per_batch,
            minibatch_size=self.minibatch_size,
            rollout_episodes=self.rollout_episodes,
            num_iterations=self.num_iterations,
            learning_rate=self.learning_rate,
            hidden_sizes=tuple(self.hidden_sizes),
            normalize_advantages=self.normalize_advantages,
            literal_entropy_sign=self.literal_entropy_sign,
        )

    def fit(self, X: ScenarioSpec, y=None, *, catalog: ActionCatalog, rules=(), aggregate=False):
        encoder = EncoderConfig(self.encoder_dimension, self.encoder_version)
        self.artifact_, self.metrics_ = run_ppo(
            X, catalog, rules, self._config(), encoder, self.seed, aggregate=aggregate
        )
        return self

    def predict(self, X: np.ndarray, allowed: Sequence[tuple[int, ...]] | None = None):
        X = np.atleast_2d(X)
        full = tuple(range(self.artifact_.n_actions))
        return np.array(
            [
                self.artifact_.greedy_action(x, full if allowed is None else allowed[i])
                for i, x in enumerate(X)
            ]
        )

    def predict_proba(self, X: np.ndarray, allowed: Sequence[tuple[int, ...]] | None = None):
        X = np.atleast_2d(X)
        full = tuple(range(self.artifact_.n_actions))
        return np.stack(
            [
                self.artifact_.action_probabilities(x, full if allowed is None else allowed[i])
                for i, x in enumerate(X)
            ]
        )
