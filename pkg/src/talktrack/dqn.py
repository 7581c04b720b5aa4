"""Q-learning with replay, a frozen target network, and masked exploration.

Both exploration and the greedy argmax are restricted to the compliance
mask intersected with the segment's eligible actions, and TD targets
bootstrap only over the stored next-state mask, so the learned values never
depend on actions the agent could not take.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .artifact import PolicyArtifact
from .compliance import ComplianceMonitor, ComplianceRule, mask_actions
from .dialogue import ActionCatalog, EncoderConfig, encode_values
from .env import DialogueEnv, ScenarioSpec
from .errors import ConfigError, DivergenceError
from .nn import Mlp, backward, forward, init_mlp, make_optimizer, optimizer_step
from .replay import ReplayBuffer, Transition


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 1.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.35
    epsilon_decay: float = 0.9995
    target_update_period: int = 100
    batch_size: int = 64
    buffer_capacity: int = 20_000
    learning_rate: float = 1e-3
    num_episodes: int = 9_000
    max_turns: int | None = None  # per-episode step cap; None uses the scenario budget
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ConfigError("epsilon_decay must be in (0, 1]")
        if self.target_update_period < 1:
            raise ConfigError("target_update_period must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch_size and buffer_capacity must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.num_episodes < 0:
            raise ConfigError("num_episodes must be >= 0")


def select_action(
    q_net: Mlp,
    state_enc: np.ndarray,
    epsilon: float,
    allowed: Sequence[int],
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy over the allowed set; greedy ties break to the lowest
    index. The compliance gate guarantees allowed is never empty."""
    assert len(allowed) > 0, "allowed action set must never be empty"
    if rng.random() < epsilon:
        return int(allowed[rng.integers(len(allowed))])
    scores, _ = forward(q_net, state_enc)
    masked = np.full(scores.shape[-1], -np.inf)
    masked[list(allowed)] = scores[list(allowed)]
    return int(np.argmax(masked))


def td_targets(batch: Sequence[Transition], target_net: Mlp, gamma: float) -> np.ndarray:
    """y_i = r_i at terminals, else r_i + gamma * max over the stored
    next-state mask of the target network's Q."""
    if not batch:
        raise ValueError("batch must be non-empty")
    next_encs = np.stack([t.next_state_enc for t in batch])
    q_next, _ = forward(target_net, next_encs)
    y = np.empty(len(batch))
    for i, t in enumerate(batch):
        if t.done:
            y[i] = t.reward
        else:
            y[i] = t.reward + gamma * np.max(q_next[i, list(t.allowed_mask_next)])
    return y


def train_step(
    q_net: Mlp,
    target_net: Mlp,
    buffer: ReplayBuffer,
    cfg: DqnConfig,
    opt,
    rng: np.random.Generator,
) -> float:
    """One minibatch squared-error step; returns the scalar loss."""
    batch = buffer.sample_uniform(cfg.batch_size, rng)
    encs = np.stack([t.state_enc for t in batch])
    actions = np.array([t.action_index for t in batch])
    q_all, cache = forward(q_net, encs)
    y = td_targets(batch, target_net, cfg.gamma)
    rows = np.arange(len(batch))
    diffs = q_all[rows, actions] - y
    loss = float(np.mean(diffs**2))
    if not np.isfinite(loss):
        raise DivergenceError(f"DQN loss diverged to {loss}")
    grad_out = np.zeros_like(q_all)
    grad_out[rows, actions] = 2.0 * diffs / len(batch)
    grads = backward(q_net, cache, grad_out)
    optimizer_step(q_net, grads, opt)
    return loss


def run_dqn(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    cfg: DqnConfig,
    encoder: EncoderConfig,
    seed: int,
    aggregate: bool = False,
    monitor: ComplianceMonitor | None = None,
    trace_sink: Callable[[dict], None] | None = None,
) -> tuple[PolicyArtifact, list[dict]]:
    """Full training loop: epsilon decays once per episode, the target
    network syncs every ``target_update_period`` environment steps, and no
    gradient step runs until the buffer holds a full batch."""
    agent_rng = np.random.default_rng([seed, 0])
    env = DialogueEnv(spec, catalog, seed=[seed, 1])
    monitor = monitor if monitor is not None else ComplianceMonitor(rules)

    dims = [encoder.dimension, *cfg.hidden_sizes, len(catalog)]
    q_net = init_mlp(dims, agent_rng)
    target_net = q_net.copy()
    opt = make_optimizer("adam", cfg.learning_rate)
    buffer = ReplayBuffer(cfg.buffer_capacity)

    segments = sorted(spec.segments)
    epsilon = cfg.epsilon_start
    total_steps = 0
    metrics: list[dict] = []
    step_env = env.step_aggregate if aggregate else env.step

    for episode in range(cfg.num_episodes):
        state = env.reset(segments[episode % len(segments)])
        enc = encode_values(state, encoder)
        episode_return = 0.0
        losses: list[float] = []
        steps = 0
        while True:
            allowed = _combined_mask(env, catalog, rules, state)
            action = select_action(q_net, enc, epsilon, allowed, agent_rng)
            monitor.verify_executed(catalog[action], state)
            outcome = step_env(state, catalog[action].id)
            done = outcome.done
            if cfg.max_turns is not None and steps + 1 >= cfg.max_turns:
                done = True
            next_enc = encode_values(outcome.next_state, encoder)
            allowed_next = (
                () if done else _combined_mask(env, catalog, rules, outcome.next_state)
            )
            buffer.push(
                Transition(
                    state_enc=enc,
                    action_index=action,
                    reward=outcome.reward,
                    next_state_enc=next_enc,
                    done=done,
                    allowed_mask_next=allowed_next,
                )
            )
            if trace_sink is not None:
                trace_sink(
                    {
                        "episode": episode,
                        "turn": state.turn,
                        "phase": state.phase_key,
                        "action": catalog[action].id,
                        "reply": outcome.info["reply_text"],
                        "reward": outcome.reward,
                        "done": done,
                    }
                )
            episode_return += outcome.reward
            total_steps += 1
            steps += 1
            if len(buffer) >= cfg.batch_size:
                losses.append(train_step(q_net, target_net, buffer, cfg, opt, agent_rng))
            if total_steps % cfg.target_update_period == 0:
                target_net = q_net.copy()
            if done:
                break
            state = outcome.next_state
            enc = next_enc
        metrics.append(
            {
                "episode": episode,
                "return": episode_return,
                "epsilon": epsilon,
                "loss_mean": float(np.mean(losses)) if losses else None,
                "steps": steps,
            }
        )
        epsilon = max(cfg.epsilon_end, epsilon * cfg.epsilon_decay)

    artifact = PolicyArtifact(
        algo="dqn",
        encoder=encoder,
        catalog_ids=catalog.ids,
        networks={"q": q_net},
        config=asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes)},
        seed=seed,
        meta={
            "env_steps": total_steps,
            "episodes": cfg.num_episodes,
            "final_epsilon": epsilon,
            "env_rng_draws": env.rng_draws,
            "compliance_violations": monitor.violations,
        },
    )
    return artifact, metrics


def _combined_mask(
    env: DialogueEnv,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    state,
) -> tuple[int, ...]:
    """Eligible-for-segment intersected with the compliance mask."""
    eligible = set(env.eligible_indices(state))
    return tuple(i for i in mask_actions(catalog, state, rules) if i in eligible)


class DqnAgent(BaseEstimator):
    """Estimator wrapper: fit on a scenario, predict greedy actions.

    Parameters mirror :class:`DqnConfig` plus the encoder settings and the
    seed, so ``get_params``/``set_params`` expose every knob to pipelines
    and grid search.
    """

    def __init__(
        self,
        gamma: float = 1.0,
        epsilon_start: float = 1.0,
        epsilon_end: float = 0.35,
        epsilon_decay: float = 0.9995,
        target_update_period: int = 100,
        batch_size: int = 64,
        buffer_capacity: int = 20_000,
        learning_rate: float = 1e-3,
        num_episodes: int = 9_000,
        hidden_sizes: tuple[int, ...] = (64, 64),
        encoder_dimension: int = 32,
        encoder_version: str = "1",
        seed: int = 0,
    ):
        self.gamma = gamma
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay = epsilon_decay
        self.target_update_period = target_update_period
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.learning_rate = learning_rate
        self.num_episodes = num_episodes
        self.hidden_sizes = hidden_sizes
        self.encoder_dimension = encoder_dimension
        self.encoder_version = encoder_version
        self.seed = seed

    def _config(self) -> DqnConfig:
        return DqnConfig(
            gamma=self.gamma,
            epsilon_start=self.epsilon_start,
            epsilon_end=self.epsilon_end,
            epsilon_decay=self.epsilon_decay,
            target_update_period=self.target_update_period,
            batch_size=self.batch_size,
            buffer_capacity=self.buffer_capacity,
            learning_rate=self.learning_rate,
            num_episodes=self.num_episodes,
            hidden_sizes=tuple(self.hidden_sizes),
        )

    def fit(self, X: ScenarioSpec, y=None, *, catalog: ActionCatalog, rules=(), aggregate=False):
        encoder = EncoderConfig(self.encoder_dimension, self.encoder_version)
        self.artifact_, self.metrics_ = run_dqn(
            X, catalog, rules, self._config(), encoder, self.seed, aggregate=aggregate
        )
        return self

    def predict(self, X: np.ndarray, allowed: Sequence[tuple[int, ...]] | None = None):
        """Greedy actions for encoded states X (n, dimension)."""
        X = np.atleast_2d(X)
        full = tuple(range(self.artifact_.n_actions))
        return np.array(
            [
                self.artifact_.greedy_action(x, full if allowed is None else allowed[i])
                for i, x in enumerate(X)
            ]
        )
