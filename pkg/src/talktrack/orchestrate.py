"""Run configuration, training-mode dispatch, evaluation, and A/B comparison.

A run is described by one TOML file ([run], [encoder], and one section per
algorithm); everything is validated before any work starts, and every
output (artifact, metrics, trace) is a pure function of config + seed, so
reruns are byte-identical.

Modes: online trains against the sampled simulator, aggregate routes every
environment call through the deterministic aggregate-feedback path (the
whole run then consumes no environment randomness and is independent of
the run seed), offline trains from ingested logs only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .artifact import PolicyArtifact, file_digest
from .compliance import AuditLog, ComplianceMonitor, ComplianceRule, load_rules, mask_actions
from .dialogue import ActionCatalog, EncoderConfig, encode_values, load_catalog
from .dqn import DqnConfig, run_dqn, td_targets, train_step, _combined_mask
from .env import DialogueEnv, ScenarioSpec, load_scenario, toyshop_paths
from .errors import ConfigError, DataError
from .logs import Episode, ingest_dir, ingest_log
from .nn import init_mlp, make_optimizer
from .ppo import PpoConfig, run_ppo
from .replay import ReplayBuffer, Transition
from .rlhf import (
    AnnotatedDialogue,
    AnnotatedExample,
    RewardModel,
    RewardModelConfig,
    SftConfig,
    load_preference_records,
    reward_model_artifact,
    reward_model_train,
    rlhf_finetune,
    sft_artifact,
    sft_train,
)

ALGOS = ("dqn", "ppo", "sft", "reward-model", "rlhf")
MODES = ("online", "offline", "aggregate")

# Aggregate mode is deterministic end to end: the run seed is replaced by
# this constant so two runs with different seeds produce identical traces.
AGGREGATE_CANONICAL_SEED = 710_310


@dataclass
class RunConfig:
    scenario_path: str
    catalog_path: str
    rules_path: str
    algo: str
    mode: str
    seed: int
    output_dir: str
    encoder: EncoderConfig
    algo_section: dict = field(default_factory=dict)
    serve_section: dict = field(default_factory=dict)
    offline_logs: str | None = None

    spec: ScenarioSpec = None
    catalog: ActionCatalog = None
    rules: tuple[ComplianceRule, ...] = ()

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                payload = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
        return cls.from_dict(payload, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_dict(cls, payload: dict, base_dir: str = ".") -> "RunConfig":
        run = payload.get("run")
        if not isinstance(run, dict):
            raise ConfigError("missing [run] section")

        def require(key):
            if key not in run:
                raise ConfigError(f"run.{key} is required")
            return run[key]

        algo = str(require("algo"))
        if algo not in ALGOS:
            raise ConfigError(f"run.algo must be one of {ALGOS}, got {algo!r}")
        mode = str(run.get("mode", "online"))
        if mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {mode!r}")
        seed = require("seed")
        if not isinstance(seed, int):
            raise ConfigError("run.seed must be an integer")

        def resolve(key, value):
            if value == "toyshop":
                return toyshop_paths()[key]
            return value if os.path.isabs(value) else os.path.join(base_dir, value)

        scenario_path = resolve("scenario", str(require("scenario")))
        catalog_path = resolve("catalog", str(require("catalog")))
        rules_path = resolve("rules", str(require("rules")))
        for name, p in (("scenario", scenario_path), ("catalog", catalog_path), ("rules", rules_path)):
            if not os.path.exists(p):
                raise ConfigError(f"run.{name} file does not exist: {p}")

        enc_section = payload.get("encoder", {})
        try:
            encoder = EncoderConfig(
                dimension=int(enc_section.get("dimension", 32)),
                version=str(enc_section.get("version", "1")),
            )
        except ConfigError as exc:
            raise ConfigError(f"encoder.dimension: {exc}") from exc

        section_key = algo.replace("-", "_")
        algo_section = payload.get(section_key, {})
        if not isinstance(algo_section, dict):
            raise ConfigError(f"[{section_key}] must be a table")
        algo_section = dict(algo_section)
        for path_key in ("preferences", "base_artifact", "reward_model_artifact"):
            if path_key in algo_section:
                algo_section[path_key] = resolve(path_key, str(algo_section[path_key]))

        offline_logs = run.get("logs")
        if offline_logs is not None:
            offline_logs = resolve("logs", str(offline_logs))

        serve_section = dict(payload.get("serve", {}))
        for path_key in ("artifact", "label_store", "session_store", "task_journal", "static_dir"):
            if path_key in serve_section:
                serve_section[path_key] = resolve(path_key, str(serve_section[path_key]))

        config = cls(
            scenario_path=scenario_path,
            catalog_path=catalog_path,
            rules_path=rules_path,
            algo=algo,
            mode=mode,
            seed=seed,
            output_dir=resolve("output_dir", str(run.get("output_dir", "runs/out"))),
            encoder=encoder,
            algo_section=dict(algo_section),
            serve_section=serve_section,
            offline_logs=offline_logs,
        )
        config.load_world()
        return config

    def load_world(self) -> None:
        self.spec = load_scenario(self.scenario_path)
        self.catalog = load_catalog(self.catalog_path)
        self.rules = load_rules(self.rules_path, self.catalog)

    def section_config(self, cls, **extra):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(self.algo_section) - known - set(extra)
        if unknown:
            raise ConfigError(
                f"[{self.algo.replace('-', '_')}] has unknown keys {sorted(unknown)}"
            )
        kwargs = {k: v for k, v in self.algo_section.items() if k in known}
        if "hidden_sizes" in kwargs:
            kwargs["hidden_sizes"] = tuple(kwargs["hidden_sizes"])
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"[{self.algo.replace('-', '_')}]: {exc}") from exc


@dataclass
class TrainResult:
    artifact_path: str
    metrics_path: str
    artifact_digest: str
    metrics_digest: str
    meta: dict


def _write_jsonl(path: str, rows: Sequence[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def train(config: RunConfig) -> TrainResult:
    """Dispatch to the configured algorithm and persist artifact + metrics."""
    os.makedirs(config.output_dir, exist_ok=True)
    aggregate = config.mode == "aggregate"
    seed = AGGREGATE_CANONICAL_SEED if aggregate else config.seed
    audit = AuditLog(os.path.join(config.output_dir, "audit.jsonl"))
    monitor = ComplianceMonitor(config.rules, audit)
    trace_rows: list[dict] = []
    trace_sink = trace_rows.append if aggregate else None

    if config.algo == "dqn":
        if config.mode == "offline":
            artifact, metrics = _train_dqn_offline(config, monitor)
        else:
            cfg = config.section_config(DqnConfig)
            artifact, metrics = run_dqn(
                config.spec, config.catalog, config.rules, cfg, config.encoder,
                seed, aggregate=aggregate, monitor=monitor, trace_sink=trace_sink,
            )
    elif config.algo == "ppo":
        if config.mode == "offline":
            raise ConfigError("run.mode: ppo supports online and aggregate modes only")
        cfg = config.section_config(PpoConfig)
        artifact, metrics = run_ppo(
            config.spec, config.catalog, config.rules, cfg, config.encoder,
            seed, aggregate=aggregate, monitor=monitor,
        )
    elif config.algo == "sft":
        artifact, metrics = _train_sft(config, seed)
    elif config.algo == "reward-model":
        artifact, metrics = _train_reward_model(config, seed)
    elif config.algo == "rlhf":
        artifact, metrics = _train_rlhf(config, seed, monitor)
    else:  # pragma: no cover - guarded by RunConfig validation
        raise ConfigError(f"unknown algo {config.algo}")

    if aggregate:
        artifact.meta["env_deterministic"] = artifact.meta.get("env_rng_draws", 0) == 0
        artifact.meta["seed_ignored_in_aggregate_mode"] = True
        _write_jsonl(os.path.join(config.output_dir, "env_trace.jsonl"), trace_rows)

    artifact.meta["mode"] = config.mode
    artifact_path = os.path.join(config.output_dir, "artifact.json")
    metrics_path = os.path.join(config.output_dir, "metrics.jsonl")
    artifact.save(artifact_path)
    _write_jsonl(metrics_path, metrics)
    return TrainResult(
        artifact_path=artifact_path,
        metrics_path=metrics_path,
        artifact_digest=file_digest(artifact_path),
        metrics_digest=file_digest(metrics_path),
        meta=dict(artifact.meta),
    )


def _load_offline_episodes(config: RunConfig) -> list[Episode]:
    if not config.offline_logs:
        raise ConfigError("run.logs is required in offline mode")
    if os.path.isdir(config.offline_logs):
        report = ingest_dir(config.offline_logs)
    else:
        report = ingest_log(config.offline_logs)
    if report.errors:
        locations = ", ".join(f"line {n}" for n, _ in report.errors[:5])
        raise DataError(
            f"offline log contains {len(report.errors)} malformed line(s) ({locations})"
        )
    if not report.episodes:
        raise DataError("no training data: offline logs contain zero episodes")
    return report.episodes


def _episode_states(
    episode: Episode, spec: ScenarioSpec, catalog: ActionCatalog
) -> list[tuple]:
    """Reconstruct (state, action_index, reward, next_state, done) tuples
    from a logged episode."""
    from .dialogue import AGENT, USER, DialogueState

    steps = []
    history: tuple = ()
    for t, turn in enumerate(episode.turns):
        state = DialogueState(
            history=history,
            turn=t,
            max_turns=spec.max_turns,
            segment_id=episode.segment,
            phase_key=turn.phase,
        )
        action_index = catalog.index(turn.action_id)
        history = history + ((AGENT, catalog[action_index].text), (USER, turn.reply))
        done = t + 1 == len(episode.turns)
        next_phase = episode.turns[t + 1].phase if not done else None
        next_state = DialogueState(
            history=history,
            turn=t + 1,
            max_turns=spec.max_turns,
            segment_id=episode.segment,
            phase_key=next_phase,
        )
        steps.append((state, action_index, turn.reward, next_state, done))
    return steps


def _train_dqn_offline(config: RunConfig, monitor: ComplianceMonitor):
    """Off-policy Q-learning on log-derived transitions, no environment."""
    episodes = _load_offline_episodes(config)
    cfg = config.section_config(DqnConfig, offline_updates=True)
    env = DialogueEnv(config.spec, config.catalog)  # mask computation only
    buffer = ReplayBuffer(max(cfg.buffer_capacity, 1))
    for episode in episodes:
        for state, action_index, reward, next_state, done in _episode_states(
            episode, config.spec, config.catalog
        ):
            enc = encode_values(state, config.encoder)
            next_enc = encode_values(next_state, config.encoder)
            mask_next = () if done else _combined_mask(env, config.catalog, config.rules, next_state)
            buffer.push(
                Transition(enc, action_index, reward, next_enc, done, mask_next)
            )
    rng = np.random.default_rng([config.seed, 0])
    dims = [config.encoder.dimension, *cfg.hidden_sizes, len(config.catalog)]
    q_net = init_mlp(dims, rng)
    target_net = q_net.copy()
    opt = make_optimizer("adam", cfg.learning_rate)
    updates = int(config.algo_section.get("offline_updates", 4000))
    metrics = []
    for step in range(updates):
        loss = train_step(q_net, target_net, buffer, cfg, opt, rng)
        if (step + 1) % cfg.target_update_period == 0:
            target_net = q_net.copy()
        if (step + 1) % 100 == 0:
            metrics.append({"update": step + 1, "loss": loss})
    artifact = PolicyArtifact(
        algo="dqn",
        encoder=config.encoder,
        catalog_ids=config.catalog.ids,
        networks={"q": q_net},
        config=asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes), "offline_updates": updates},
        seed=config.seed,
        meta={"offline_transitions": len(buffer), "episodes_ingested": len(episodes)},
    )
    return artifact, metrics


def _dialogues_from_logs(config: RunConfig) -> tuple[list[AnnotatedDialogue], int]:
    """Annotated dialogues from episode logs.

    Logged actions that the *current* rule set blocks cannot be cloned (the
    masked softmax gives them probability zero); they are skipped and
    counted rather than silently dropped.
    """
    from .dialogue import state_digest

    episodes = _load_offline_episodes(config)
    env = DialogueEnv(config.spec, config.catalog)
    dialogues = []
    skipped_blocked = 0
    for episode in episodes:
        examples = []
        for state, action_index, _, _, _ in _episode_states(episode, config.spec, config.catalog):
            allowed = _combined_mask(env, config.catalog, config.rules, state)
            if action_index not in allowed:
                skipped_blocked += 1
                continue
            examples.append(
                AnnotatedExample(
                    state_digest=state_digest(state),
                    state_enc=encode_values(state, config.encoder),
                    action_index=action_index,
                    allowed=allowed,
                )
            )
        if examples:
            dialogues.append(AnnotatedDialogue(examples=tuple(examples), source="human"))
    return dialogues, skipped_blocked


def _train_sft(config: RunConfig, seed: int):
    cfg = config.section_config(SftConfig)
    dialogues, skipped_blocked = _dialogues_from_logs(config)
    if not dialogues:
        raise DataError("no training data: every logged action is blocked by the active rules")
    policy, losses = sft_train(dialogues, config.catalog, cfg, config.encoder, seed=seed)
    artifact = sft_artifact(
        policy, config.catalog, config.encoder, cfg, seed,
        meta={
            "examples": sum(len(d.examples) for d in dialogues),
            "skipped_blocked_actions": skipped_blocked,
            "final_loss": losses[-1],
        },
    )
    metrics = [{"epoch": i, "loss": loss} for i, loss in enumerate(losses)]
    return artifact, metrics


def _train_reward_model(config: RunConfig, seed: int):
    prefs_path = config.algo_section.get("preferences")
    if not prefs_path:
        raise ConfigError("[reward_model] preferences path is required")
    records = load_preference_records(prefs_path)
    if not records:
        raise DataError("no training data: preference store is empty")
    section = {k: v for k, v in config.algo_section.items() if k != "preferences"}
    known = set(RewardModelConfig.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[reward_model] has unknown keys {sorted(unknown)}")
    if "hidden_sizes" in section:
        section["hidden_sizes"] = tuple(section["hidden_sizes"])
    cfg = RewardModelConfig(**section)
    result = reward_model_train(records, cfg, n_actions=len(config.catalog), seed=seed)
    artifact = reward_model_artifact(result, config.catalog, config.encoder, cfg, seed)
    metrics = [{"epoch": i, "loss": loss} for i, loss in enumerate(result.train_losses)]
    metrics.append({"held_out_accuracy": result.held_out_accuracy})
    return artifact, metrics


def _train_rlhf(config: RunConfig, seed: int, monitor: ComplianceMonitor):
    base_path = config.algo_section.get("base_artifact")
    rm_path = config.algo_section.get("reward_model_artifact")
    if not base_path or not rm_path:
        raise ConfigError("[rlhf] base_artifact and reward_model_artifact are required")
    base = PolicyArtifact.load(base_path)
    rm_art = PolicyArtifact.load(rm_path)
    base.check_fingerprint(config.encoder)
    rm_art.check_fingerprint(config.encoder)
    kl_coef = float(config.algo_section.get("kl_coef", 0.02))
    section = {
        k: v
        for k, v in config.algo_section.items()
        if k not in ("base_artifact", "reward_model_artifact", "kl_coef")
    }
    known = set(PpoConfig.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[rlhf] has unknown keys {sorted(unknown)}")
    if "hidden_sizes" in section:
        section["hidden_sizes"] = tuple(section["hidden_sizes"])
    ppo_cfg = PpoConfig(**{"entropy_coef": 0.0, **section})
    reward_model = RewardModel(rm_art.networks["reward"], len(config.catalog))
    artifact, metrics = rlhf_finetune(
        base.networks["policy"], reward_model, config.spec, config.catalog,
        config.rules, ppo_cfg, config.encoder, seed, kl_coef=kl_coef,
    )
    return artifact, metrics


@dataclass
class EvalReport:
    episodes: int
    conversion_rate: float
    mean_return: float
    mean_turns: float
    compliance_violations: int
    per_segment: dict

    def to_json(self) -> dict:
        return {
            "episodes": self.episodes,
            "conversion_rate": self.conversion_rate,
            "mean_return": self.mean_return,
            "mean_turns": self.mean_turns,
            "compliance_violations": self.compliance_violations,
            "per_segment": self.per_segment,
        }


def evaluate(
    artifact: PolicyArtifact,
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    n_episodes: int,
    seed: int,
    encoder: EncoderConfig | None = None,
    monitor: ComplianceMonitor | None = None,
) -> EvalReport:
    """Greedy-policy rollouts with per-episode seed derivation.

    Episode i always runs on rng stream (seed, i) and segment i mod
    #segments, so results are independent of any worker partitioning.
    """
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")
    encoder = encoder or artifact.encoder
    artifact.check_fingerprint(encoder)
    if tuple(artifact.catalog_ids) != catalog.ids:
        raise DataError("artifact catalog order does not match the active catalog")
    monitor = monitor if monitor is not None else ComplianceMonitor(rules)
    segments = sorted(spec.segments)
    totals = {seg: {"episodes": 0, "conversions": 0, "return": 0.0, "turns": 0} for seg in segments}
    for i in range(n_episodes):
        segment = segments[i % len(segments)]
        env = DialogueEnv(spec, catalog, seed=[seed, 9, i])
        state = env.reset(segment)
        bucket = totals[segment]
        bucket["episodes"] += 1
        while True:
            allowed = _combined_mask(env, catalog, rules, state)
            action = artifact.greedy_action(encode_values(state, encoder), allowed)
            monitor.verify_executed(catalog[action], state)
            out = env.step(state, catalog[action].id)
            bucket["return"] += out.reward
            bucket["turns"] += 1
            if out.info.get("converted"):
                bucket["conversions"] += 1
            if out.done:
                break
            state = out.next_state
    conversions = sum(b["conversions"] for b in totals.values())
    total_return = sum(b["return"] for b in totals.values())
    total_turns = sum(b["turns"] for b in totals.values())
    per_segment = {
        seg: {
            "episodes": b["episodes"],
            "conversion_rate": b["conversions"] / b["episodes"] if b["episodes"] else 0.0,
            "mean_return": b["return"] / b["episodes"] if b["episodes"] else 0.0,
            "mean_turns": b["turns"] / b["episodes"] if b["episodes"] else 0.0,
        }
        for seg, b in totals.items()
    }
    return EvalReport(
        episodes=n_episodes,
        conversion_rate=conversions / n_episodes,
        mean_return=total_return / n_episodes,
        mean_turns=total_turns / n_episodes,
        compliance_violations=monitor.violations,
        per_segment=per_segment,
    )


@dataclass
class AbResult:
    lift: float
    ci_low: float
    ci_high: float
    significant: bool
    conversion_a: float
    conversion_b: float
    n_per_arm: int

    def to_json(self) -> dict:
        return {
            "lift": self.lift,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "significant": self.significant,
            "conversion_a": self.conversion_a,
            "conversion_b": self.conversion_b,
            "n_per_arm": self.n_per_arm,
        }


def oracle_match_fraction(
    artifact: PolicyArtifact,
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    gamma: float = 1.0,
    episodes: int = 2000,
    samples_per_state: int = 8,
    seed: int = 555,
) -> tuple[float, list]:
    """Fraction of reachable (phase, turn) states where the artifact's greedy
    policy picks a value-iteration-optimal action.

    A grid state corresponds to many concrete histories, so each one is
    graded on up to ``samples_per_state`` representative states drawn from
    random play, by majority vote; exact value ties count every tied action
    as optimal. Returns (fraction, mismatched states).
    """
    from .mdp import enumerate_mdp, value_iteration

    matched = 0
    total = 0
    misses = []
    for segment in sorted(spec.segments):
        mdp = enumerate_mdp(spec, catalog, segment, rules)
        vi = value_iteration(mdp, gamma=gamma)
        env = DialogueEnv(spec, catalog, seed=[seed, 40])
        rng = np.random.default_rng([seed, 41])
        reps: dict = {}
        for _ in range(episodes):
            state = env.reset(segment)
            while not state.is_terminal:
                bucket = reps.setdefault((state.phase_key, state.turn), [])
                if len(bucket) < samples_per_state:
                    bucket.append(state)
                allowed = _combined_mask(env, catalog, rules, state)
                out = env.step(state, catalog[allowed[rng.integers(len(allowed))]].id)
                if out.done:
                    break
                state = out.next_state
        for s in mdp.reachable_indices():
            phase, turn = mdp.states[s]
            samples = reps.get((phase, turn), [])
            if not samples:
                continue
            total += 1
            optimal = set(vi.optimal_actions(s))
            votes = sum(
                artifact.greedy_action(
                    encode_values(st, artifact.encoder),
                    _combined_mask(env, catalog, rules, st),
                )
                in optimal
                for st in samples
            )
            if votes * 2 > len(samples):
                matched += 1
            else:
                misses.append((segment, phase, turn))
    return matched / total if total else 0.0, misses


Z_95 = 1.959963984540054  # two-sided 95% normal quantile


def ab_compare(
    artifact_a: PolicyArtifact,
    artifact_b: PolicyArtifact,
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    rules: Sequence[ComplianceRule],
    n_per_arm: int,
    seed: int,
) -> AbResult:
    """Two-proportion z-interval on conversion rates; the lift is
    significant exactly when the 95% CI excludes zero."""
    if n_per_arm < 1:
        raise ConfigError(f"n_per_arm must be >= 1, got {n_per_arm}")
    # Disjoint episode streams per arm, both derived from the root seed.
    report_a = evaluate(artifact_a, spec, catalog, rules, n_per_arm, seed=2 * seed + 1)
    report_b = evaluate(artifact_b, spec, catalog, rules, n_per_arm, seed=2 * seed + 2)
    pa, pb = report_a.conversion_rate, report_b.conversion_rate
    se = math.sqrt(pa * (1 - pa) / n_per_arm + pb * (1 - pb) / n_per_arm)
    lift = pa - pb
    ci_low, ci_high = lift - Z_95 * se, lift + Z_95 * se
    return AbResult(
        lift=lift,
        ci_low=ci_low,
        ci_high=ci_high,
        significant=not (ci_low <= 0.0 <= ci_high),
        conversion_a=pa,
        conversion_b=pb,
        n_per_arm=n_per_arm,
    )
