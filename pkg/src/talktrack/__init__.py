"""talktrack: reinforcement learning for conversational recommendation strategies.

Trains dialogue policies (DQN, PPO, and a preference-based RLHF pipeline)
against a configurable simulated-user environment, with a compliance gate
that masks disallowed utterances, aggregate-feedback training, offline log
ingestion, evaluation/A-B tooling, and a small labeling-and-chat service.
"""

__version__ = "0.1.0"

from .artifact import PolicyArtifact, file_digest
from .compliance import (
    AuditLog,
    ComplianceMonitor,
    ComplianceRule,
    ComplianceVerdict,
    check,
    load_rules,
    mask_actions,
)
from .dialogue import (
    ActionCatalog,
    DialogueState,
    EncoderConfig,
    StateEncoder,
    StateEncoding,
    Utterance,
    encode_state,
    load_catalog,
)
from .dqn import DqnAgent, DqnConfig, run_dqn
from .env import DialogueEnv, ScenarioSpec, StepOutcome, load_scenario, toyshop_paths
from .logs import AggregateTable, Episode, aggregate, ingest_dir, ingest_log, write_episodes
from .mdp import ExplicitMdp, enumerate_mdp, policy_evaluation, uniform_policy, value_iteration
from .orchestrate import EvalReport, RunConfig, ab_compare, evaluate, oracle_match_fraction, train
from .ppo import PpoAgent, PpoConfig, compute_gae, run_ppo
from .replay import ReplayBuffer, Transition
from .rlhf import (
    AnnotatedDialogue,
    PreferenceRecord,
    RewardModel,
    preference_accuracy,
    reward_model_train,
    rlhf_finetune,
    sft_train,
    synthesize_preferences,
)

__all__ = [
    "ActionCatalog",
    "AggregateTable",
    "AnnotatedDialogue",
    "AuditLog",
    "ComplianceMonitor",
    "ComplianceRule",
    "ComplianceVerdict",
    "DialogueEnv",
    "DialogueState",
    "DqnAgent",
    "DqnConfig",
    "EncoderConfig",
    "Episode",
    "EvalReport",
    "ExplicitMdp",
    "PolicyArtifact",
    "PpoAgent",
    "PpoConfig",
    "PreferenceRecord",
    "ReplayBuffer",
    "RewardModel",
    "RunConfig",
    "ScenarioSpec",
    "StateEncoder",
    "StateEncoding",
    "StepOutcome",
    "Transition",
    "Utterance",
    "ab_compare",
    "aggregate",
    "check",
    "compute_gae",
    "encode_state",
    "enumerate_mdp",
    "evaluate",
    "file_digest",
    "ingest_dir",
    "ingest_log",
    "load_catalog",
    "load_rules",
    "load_scenario",
    "mask_actions",
    "oracle_match_fraction",
    "policy_evaluation",
    "preference_accuracy",
    "reward_model_train",
    "rlhf_finetune",
    "run_dqn",
    "run_ppo",
    "sft_train",
    "synthesize_preferences",
    "toyshop_paths",
    "train",
    "uniform_policy",
    "value_iteration",
    "write_episodes",
]
