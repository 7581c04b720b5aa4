"""Preference-based training pipeline.

Three stages: behavior-clone a base policy from annotated dialogues,
train a reward model on pairwise preferences (logistic loss on score
differences, so adding a constant per state changes nothing), then run
clipped-surrogate fine-tuning where every step's reward is the reward
model's score, never the environment's. An optional KL-to-base penalty
(kl_coef * KL(pi || pi_base), subtracted from the reward) keeps the tuned
policy near its initialization; kl_coef=0 disables it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .artifact import PolicyArtifact
from .compliance import ComplianceRule, mask_actions
from .dialogue import ActionCatalog, DialogueState, EncoderConfig, encode_values, state_digest
from .env import DialogueEnv, ScenarioSpec
from .errors import ConfigError, DataError, DivergenceError
from .hashing import fnv1a64_str
from .mdp import enumerate_mdp, value_iteration
from .nn import (
    Mlp,
    backward,
    forward,
    init_mlp,
    make_optimizer,
    masked_log_softmax,
    optimizer_step,
)
from .ppo import PpoConfig, run_ppo


@dataclass(frozen=True)
class AnnotatedExample:
    state_digest: str
    state_enc: np.ndarray
    action_index: int
    allowed: tuple[int, ...] | None = None  # None means every action was available


@dataclass(frozen=True)
class AnnotatedDialogue:
    examples: tuple[AnnotatedExample, ...]
    source: str = "human"


@dataclass(frozen=True)
class PreferenceRecord:
    state_digest: str
    state_enc: np.ndarray
    action_a: int
    action_b: int
    choice: str  # "A" or "B"
    annotator_id: str = "synthetic"
    timestamp: float = 0.0

    def __post_init__(self):
        if self.action_a == self.action_b:
            raise ValueError("preference candidates must differ")
        if self.choice not in ("A", "B"):
            raise ValueError(f"choice must be 'A' or 'B', got {self.choice!r}")

    @property
    def winner(self) -> int:
        return self.action_a if self.choice == "A" else self.action_b

    @property
    def loser(self) -> int:
        return self.action_b if self.choice == "A" else self.action_a

    def content_key(self) -> str:
        """Deterministic identity used for the train/held-out split."""
        return json.dumps(
            {
                "digest": self.state_digest,
                "enc": [repr(v) for v in self.state_enc],
                "a": self.action_a,
                "b": self.action_b,
            },
            sort_keys=True,
        )


def record_to_json(record: PreferenceRecord) -> dict:
    return {
        "state_digest": record.state_digest,
        "state_enc": record.state_enc.tolist(),
        "a": record.action_a,
        "b": record.action_b,
        "choice": record.choice,
        "annotator": record.annotator_id,
        "ts": record.timestamp,
    }


def record_from_json(payload: dict) -> PreferenceRecord:
    try:
        return PreferenceRecord(
            state_digest=str(payload["state_digest"]),
            state_enc=np.asarray(payload["state_enc"], dtype=np.float64),
            action_a=int(payload["a"]),
            action_b=int(payload["b"]),
            choice=str(payload["choice"]),
            annotator_id=str(payload["annotator"]),
            timestamp=float(payload["ts"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed preference record: {exc}") from exc


def load_preference_records(path: str) -> list[PreferenceRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read preference store {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(record_from_json(json.loads(line)))
        except (json.JSONDecodeError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def append_preference_record(path: str, record: PreferenceRecord, fsync: bool = False) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")
        if fsync:
            fh.flush()
            os.fsync(fh.fileno())


# --- Step 1: supervised fine-tuning ----------------------------------------


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 3e-3
    epochs: int = 400
    hidden_sizes: tuple[int, ...] = (64, 64)
    full_batch: bool = True
    minibatch_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("invalid SFT config")


def sft_train(
    dialogues: Sequence[AnnotatedDialogue],
    catalog: ActionCatalog,
    cfg: SftConfig,
    encoder: EncoderConfig,
    seed: int = 0,
) -> tuple[Mlp, list[float]]:
    """Cross-entropy behavior cloning of the annotated action choices under
    a masked softmax. Returns the policy network and the per-epoch loss."""
    examples = [ex for d in dialogues for ex in d.examples]
    if not examples:
        raise DataError("SFT needs at least one annotated example")
    n_actions = len(catalog)
    X = np.stack([ex.state_enc for ex in examples])
    y = np.array([ex.action_index for ex in examples])
    if np.any(y < 0) or np.any(y >= n_actions):
        raise DataError("annotated action index outside the catalog")
    masks = np.zeros((len(examples), n_actions), dtype=bool)
    for i, ex in enumerate(examples):
        if ex.allowed is None:
            masks[i, :] = True
        else:
            masks[i, list(ex.allowed)] = True
        if not masks[i, ex.action_index]:
            raise DataError(
                f"annotated action {ex.action_index} at {ex.state_digest!r} is outside "
                f"its own allowed mask; filter such examples before training"
            )
    rng = np.random.default_rng([seed, 3])
    net = init_mlp([encoder.dimension, *cfg.hidden_sizes, n_actions], rng)
    opt = make_optimizer("adam", cfg.learning_rate)
    losses = []
    n = len(examples)
    for _ in range(cfg.epochs):
        if cfg.full_batch:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i : i + cfg.minibatch_size] for i in range(0, n, cfg.minibatch_size)]
        epoch_loss = 0.0
        for idx in batches:
            logits, cache = forward(net, X[idx])
            log_probs = masked_log_softmax(logits, masks[idx])
            rows = np.arange(len(idx))
            loss = float(-log_probs[rows, y[idx]].mean())
            if not np.isfinite(loss):
                raise DivergenceError("SFT loss diverged")
            probs = np.where(masks[idx], np.exp(log_probs), 0.0)
            grad = probs / len(idx)
            grad[rows, y[idx]] -= 1.0 / len(idx)
            optimizer_step(net, backward(net, cache, grad), opt)
            epoch_loss += loss * len(idx) / n
        losses.append(epoch_loss)
    return net, losses


def synthesize_expert_dialogues(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    encoder: EncoderConfig,
    episodes: int,
    seed: int = 0,
) -> list[AnnotatedDialogue]:
    """Synthetic-expert annotations: the value-iteration-optimal action at
    every state of sampled episodes (the expert plays, replies are sampled)."""
    env = DialogueEnv(spec, catalog, seed=[seed, 4])
    segments = sorted(spec.segments)
    oracles = {
        seg: (enumerate_mdp(spec, catalog, seg, rules), None) for seg in segments
    }
    oracles = {
        seg: (mdp, value_iteration(mdp)) for seg, (mdp, _) in oracles.items()
    }
    dialogues = []
    for episode in range(episodes):
        segment = segments[episode % len(segments)]
        mdp, vi = oracles[segment]
        state = env.reset(segment)
        examples = []
        while True:
            s = mdp.state_index(state.phase_key, state.turn)
            action = int(vi.greedy[s])
            allowed = tuple(
                i
                for i in mask_actions(catalog, state, rules)
                if i in set(env.eligible_indices(state))
            )
            examples.append(
                AnnotatedExample(
                    state_digest=state_digest(state),
                    state_enc=encode_values(state, encoder),
                    action_index=action,
                    allowed=allowed,
                )
            )
            out = env.step(state, catalog[action].id)
            if out.done:
                break
            state = out.next_state
        dialogues.append(AnnotatedDialogue(examples=tuple(examples), source="synthetic-expert"))
    return dialogues


# --- Step 2: reward model ---------------------------------------------------


class RewardModel:
    """Scores (state encoding, action) pairs; input is the encoding
    concatenated with a one-hot action."""

    def __init__(self, net: Mlp, n_actions: int):
        if net.layer_dims[-1] != 1:
            raise ValueError("reward model net must have a scalar output")
        self.net = net
        self.n_actions = n_actions

    @property
    def input_dim(self) -> int:
        return self.net.layer_dims[0] - self.n_actions

    def _inputs(self, encs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        encs = np.atleast_2d(encs)
        onehot = np.zeros((len(encs), self.n_actions))
        onehot[np.arange(len(encs)), actions] = 1.0
        return np.concatenate([encs, onehot], axis=1)

    def score(self, enc: np.ndarray, action: int) -> float:
        out, _ = forward(self.net, self._inputs(enc[None, :], np.array([action])))
        return float(out[0, 0])

    def score_batch(self, encs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out, _ = forward(self.net, self._inputs(encs, actions))
        return out[:, 0]

    def all_action_scores(self, enc: np.ndarray) -> np.ndarray:
        encs = np.repeat(enc[None, :], self.n_actions, axis=0)
        return self.score_batch(encs, np.arange(self.n_actions))

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "n_actions": self.n_actions}

    @classmethod
    def from_dict(cls, payload: dict) -> "RewardModel":
        return cls(Mlp.from_dict(payload["net"]), int(payload["n_actions"]))


@dataclass(frozen=True)
class RewardModelConfig:
    learning_rate: float = 3e-3
    epochs: int = 300
    hidden_sizes: tuple[int, ...] = (64, 64)
    held_out_fraction_bucket: int = 10  # content hash % bucket == 0 held out

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.held_out_fraction_bucket < 2:
            raise ConfigError("invalid reward model config")


@dataclass
class RewardModelResult:
    model: RewardModel
    held_out_accuracy: float
    train_losses: list[float]
    n_train: int
    n_held_out: int


def split_records(
    records: Sequence[PreferenceRecord], bucket: int = 10
) -> tuple[list[PreferenceRecord], list[PreferenceRecord]]:
    """Deterministic 90/10 split keyed on the record's content hash."""
    train, held = [], []
    for r in records:
        (held if fnv1a64_str(r.content_key()) % bucket == 0 else train).append(r)
    return train, held


def reward_model_train(
    records: Sequence[PreferenceRecord],
    cfg: RewardModelConfig,
    n_actions: int,
    seed: int = 0,
) -> RewardModelResult:
    """Bradley-Terry training: minimize -log sigmoid(R(s, winner) - R(s, loser))."""
    if not records:
        raise DataError("reward model training needs at least one record")
    train, held = split_records(records, cfg.held_out_fraction_bucket)
    if not train:
        train, held = list(records), []
    dim = len(records[0].state_enc)
    rng = np.random.default_rng([seed, 5])
    net = init_mlp([dim + n_actions, *cfg.hidden_sizes, 1], rng)
    model = RewardModel(net, n_actions)
    opt = make_optimizer("adam", cfg.learning_rate)

    encs = np.stack([r.state_enc for r in train])
    winners = np.array([r.winner for r in train])
    losers = np.array([r.loser for r in train])
    win_inputs = model._inputs(encs, winners)
    lose_inputs = model._inputs(encs, losers)
    n = len(train)
    losses = []
    for _ in range(cfg.epochs):
        w_out, w_cache = forward(net, win_inputs)
        l_out, l_cache = forward(net, lose_inputs)
        margin = w_out[:, 0] - l_out[:, 0]
        # -log sigmoid(m) = log(1 + exp(-m)), stable at both tails
        loss = float(np.mean(np.logaddexp(0.0, -margin)))
        if not np.isfinite(loss):
            raise DivergenceError("reward model loss diverged")
        losses.append(loss)
        g = -_sigmoid(-margin) / n  # d loss / d margin
        grads = backward(net, w_cache, g[:, None])
        grads += backward(net, l_cache, -g[:, None])
        optimizer_step(net, grads, opt)
    accuracy = preference_accuracy(model, held) if held else float("nan")
    return RewardModelResult(
        model=model,
        held_out_accuracy=accuracy,
        train_losses=losses,
        n_train=n,
        n_held_out=len(held),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def preference_accuracy(model: RewardModel, records: Sequence[PreferenceRecord]) -> float:
    """Fraction of records whose score ordering matches the human choice;
    exact ties count one half."""
    if not records:
        raise DataError("preference accuracy needs at least one record")
    encs = np.stack([r.state_enc for r in records])
    winner_scores = model.score_batch(encs, np.array([r.winner for r in records]))
    loser_scores = model.score_batch(encs, np.array([r.loser for r in records]))
    correct = (winner_scores > loser_scores).astype(np.float64)
    correct[winner_scores == loser_scores] = 0.5
    return float(correct.mean())


# --- synthetic preference generation ----------------------------------------


class PlantedUtility:
    """Known ground-truth scorer used to generate and grade preferences:
    u(s, a) = w_a . enc + b_a with seeded random parameters."""

    def __init__(self, dim: int, n_actions: int, seed: int = 0, scale: float = 2.0):
        rng = np.random.default_rng([seed, 6])
        self.weights = rng.normal(scale=scale, size=(n_actions, dim))
        self.offsets = rng.normal(scale=scale, size=n_actions)
        self.n_actions = n_actions

    def score(self, enc: np.ndarray, action: int) -> float:
        return float(self.weights[action] @ enc + self.offsets[action])

    def all_scores(self, enc: np.ndarray) -> np.ndarray:
        return self.weights @ enc + self.offsets

    def argmax(self, enc: np.ndarray, allowed: Sequence[int]) -> int:
        scores = self.all_scores(enc)
        best = max(allowed, key=lambda a: (scores[a], -a))
        return int(best)


def rollout_states(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    seed: int,
) -> "Callable[[], DialogueState]":
    """Endless stream of non-terminal states from uniform-random play."""
    env = DialogueEnv(spec, catalog, seed=[seed, 7])
    rng = np.random.default_rng([seed, 8])
    segments = sorted(spec.segments)
    state_box: list[DialogueState] = []
    episode = [0]

    def next_state() -> DialogueState:
        if not state_box:
            state_box.append(env.reset(segments[episode[0] % len(segments)]))
            episode[0] += 1
        state = state_box.pop()
        eligible = set(env.eligible_indices(state))
        allowed = [i for i in mask_actions(catalog, state, rules) if i in eligible]
        out = env.step(state, catalog[allowed[rng.integers(len(allowed))]].id)
        if not out.done:
            state_box.append(out.next_state)
        return state

    return next_state


def synthesize_preferences(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    planted_utility: PlantedUtility,
    n: int,
    noise: float,
    rng: np.random.Generator,
    encoder: EncoderConfig,
    min_margin: float = 0.0,
    states_seed: int = 0,
) -> list[PreferenceRecord]:
    """Generate records whose choice follows the planted utility and flips
    with probability ``noise``. Pairs with utility margin below
    ``min_margin`` are resampled so every label has a well-defined target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= noise < 0.5:
        raise ValueError(f"noise must be in [0, 0.5), got {noise}")
    stream = rollout_states(spec, catalog, rules, seed=states_seed)
    records = []
    while len(records) < n:
        state = stream()
        enc = encode_values(state, encoder)
        eligible = {catalog.index(a) for a in spec.eligible_ids(state.segment_id)}
        candidates = sorted(
            i for i in mask_actions(catalog, state, rules) if i in eligible
        )
        if len(candidates) < 2:
            continue
        pair = rng.choice(len(candidates), size=2, replace=False)
        a, b = candidates[pair[0]], candidates[pair[1]]
        margin = abs(planted_utility.score(enc, a) - planted_utility.score(enc, b))
        if margin < min_margin:
            continue
        preferred_is_a = planted_utility.score(enc, a) > planted_utility.score(enc, b)
        if rng.random() < noise:
            preferred_is_a = not preferred_is_a
        records.append(
            PreferenceRecord(
                state_digest=state_digest(state),
                state_enc=enc,
                action_a=a,
                action_b=b,
                choice="A" if preferred_is_a else "B",
                annotator_id="synthetic",
                timestamp=float(len(records)),
            )
        )
    return records


# --- Step 3: fine-tuning against the learned reward -------------------------


def rlhf_finetune(
    base_policy: Mlp,
    reward_model: RewardModel,
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    ppo_cfg: PpoConfig,
    encoder: EncoderConfig,
    seed: int,
    kl_coef: float = 0.02,
) -> tuple[PolicyArtifact, list[dict]]:
    """Clipped-surrogate fine-tuning where each step's reward is the reward
    model's score minus a KL(pi || pi_base) penalty.

    The penalty uses the sampled-action estimator
    kl_coef * (log pi(a|s) - log pi_base(a|s)), whose expectation under pi
    is kl_coef * KL; the per-action form is what actually pins the policy,
    because a state-constant penalty would be absorbed by the value
    baseline. The environment only advances dialogue states; its reward
    channel is never read (kl_coef=0 gives the bare reward-model objective).
    """
    if kl_coef < 0:
        raise ConfigError("kl_coef must be >= 0")
    base_frozen = base_policy.copy()

    def hook(enc, mask, log_probs, action, outcome) -> float:
        score = reward_model.score(enc, action)
        if kl_coef == 0.0:
            return score
        base_logits, _ = forward(base_frozen, enc)
        base_lp = masked_log_softmax(base_logits, mask)
        log_ratio = float(log_probs[action] - base_lp[action])
        return score - kl_coef * log_ratio

    artifact, metrics = run_ppo(
        spec,
        catalog,
        rules,
        ppo_cfg,
        encoder,
        seed,
        policy_init=base_frozen,
        reward_hook=hook,
        algo_name="rlhf",
    )
    artifact.meta["kl_coef"] = kl_coef
    return artifact, metrics


# --- probe-state evaluation helpers -----------------------------------------


def collect_probe_states(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    encoder: EncoderConfig,
    n: int,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(encoding, mask) pairs from random play, for policy comparisons."""
    stream = rollout_states(spec, catalog, rules, seed=seed)
    env = DialogueEnv(spec, catalog)
    probes = []
    for _ in range(n):
        state = stream()
        enc = encode_values(state, encoder)
        eligible = set(env.eligible_indices(state))
        mask = np.zeros(len(catalog), dtype=bool)
        mask[[i for i in mask_actions(catalog, state, rules) if i in eligible]] = True
        probes.append((enc, mask))
    return probes


def policy_probabilities(policy: Mlp, enc: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits, _ = forward(policy, enc)
    log_probs = masked_log_softmax(logits, mask)
    return np.where(mask, np.exp(log_probs), 0.0)


def mean_policy_score(
    policy: Mlp, reward_model: RewardModel, probes: Sequence[tuple[np.ndarray, np.ndarray]]
) -> float:
    """Expected reward-model score of the policy's action distribution,
    averaged over probe states."""
    total = 0.0
    for enc, mask in probes:
        probs = policy_probabilities(policy, enc, mask)
        scores = reward_model.all_action_scores(enc)
        total += float(np.sum(probs * np.where(mask, scores, 0.0)))
    return total / len(probes)


def mean_argmax_score(
    reward_model: RewardModel,
    utility: PlantedUtility,
    probes: Sequence[tuple[np.ndarray, np.ndarray]],
) -> float:
    """Reward-model score of the planted-utility argmax policy."""
    total = 0.0
    for enc, mask in probes:
        best = utility.argmax(enc, list(np.flatnonzero(mask)))
        total += reward_model.score(enc, best)
    return total / len(probes)


def mean_total_variation(
    policy_a: Mlp, policy_b: Mlp, probes: Sequence[tuple[np.ndarray, np.ndarray]]
) -> float:
    total = 0.0
    for enc, mask in probes:
        pa = policy_probabilities(policy_a, enc, mask)
        pb = policy_probabilities(policy_b, enc, mask)
        total += 0.5 * float(np.abs(pa - pb).sum())
    return total / len(probes)


def sft_artifact(
    policy: Mlp,
    catalog: ActionCatalog,
    encoder: EncoderConfig,
    cfg: SftConfig,
    seed: int,
    meta: dict | None = None,
) -> PolicyArtifact:
    return PolicyArtifact(
        algo="sft",
        encoder=encoder,
        catalog_ids=catalog.ids,
        networks={"policy": policy},
        config=asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes)},
        seed=seed,
        meta=meta or {},
    )


def reward_model_artifact(
    result: RewardModelResult,
    catalog: ActionCatalog,
    encoder: EncoderConfig,
    cfg: RewardModelConfig,
    seed: int,
) -> PolicyArtifact:
    return PolicyArtifact(
        algo="reward-model",
        encoder=encoder,
        catalog_ids=catalog.ids,
        networks={"reward": result.model.net},
        config=asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes)},
        seed=seed,
        meta={
            "held_out_accuracy": result.held_out_accuracy,
            "n_train": result.n_train,
            "n_held_out": result.n_held_out,
        },
    )
