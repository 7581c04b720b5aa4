import json
import os

import numpy as np
import pytest

from talktrack.artifact import PolicyArtifact, file_digest
from talktrack.dialogue import EncoderConfig
from talktrack.env import DialogueEnv
from talktrack.errors import ConfigError, DataError, FingerprintMismatchError
from talktrack.logs import Episode, TurnRecord, write_episodes
from talktrack.mdp import (
    enumerate_mdp,
    greedy_policy_matrix,
    policy_evaluation,
    value_iteration,
)
from talktrack.nn import Mlp
from talktrack.orchestrate import RunConfig, ab_compare, evaluate, train


def base_payload(tmp_path, algo="dqn", mode="online", seed=7, algo_section=None):
    payload = {
        "run": {
            "scenario": "toyshop",
            "catalog": "toyshop",
            "rules": "toyshop",
            "algo": algo,
            "mode": mode,
            "seed": seed,
            "output_dir": str(tmp_path / "out"),
        },
        "encoder": {"dimension": 16, "version": "1"},
    }
    if algo_section is not None:
        payload[algo.replace("-", "_")] = algo_section
    return payload


def constant_policy_artifact(action_index, n_actions=6, dim=16, algo="dqn"):
    """Artifact whose greedy action is always `action_index` (when allowed)."""
    net = Mlp([dim, n_actions])
    net.biases[0][action_index] = 10.0
    key = "q" if algo == "dqn" else "policy"
    return PolicyArtifact(
        algo=algo,
        encoder=EncoderConfig(dimension=dim),
        catalog_ids=("greet", "probe", "pitch_basic", "pitch_deluxe", "close", "clarify"),
        networks={key: net},
        config={},
        seed=0,
    )


class TestRunConfig:
    def test_missing_run_section(self):
        with pytest.raises(ConfigError, match=r"\[run\]"):
            RunConfig.from_dict({})

    def test_missing_seed_names_field(self, tmp_path):
        payload = base_payload(tmp_path)
        del payload["run"]["seed"]
        with pytest.raises(ConfigError, match="run.seed"):
            RunConfig.from_dict(payload)

    def test_bad_algo_named(self, tmp_path):
        payload = base_payload(tmp_path)
        payload["run"]["algo"] = "sarsa"
        with pytest.raises(ConfigError, match="run.algo"):
            RunConfig.from_dict(payload)

    def test_missing_file_is_config_error(self, tmp_path):
        payload = base_payload(tmp_path)
        payload["run"]["scenario"] = str(tmp_path / "ghost.json")
        with pytest.raises(ConfigError, match="run.scenario"):
            RunConfig.from_dict(payload)

    def test_unknown_algo_keys_rejected(self, tmp_path):
        payload = base_payload(tmp_path, algo_section={"gama": 0.9})
        config = RunConfig.from_dict(payload)
        from talktrack.dqn import DqnConfig

        with pytest.raises(ConfigError, match="gama"):
            config.section_config(DqnConfig)

    def test_toml_file_roundtrip(self, tmp_path):
        toml = tmp_path / "run.toml"
        toml.write_text(
            "\n".join(
                [
                    "[run]",
                    'scenario = "toyshop"',
                    'catalog = "toyshop"',
                    'rules = "toyshop"',
                    'algo = "dqn"',
                    'mode = "online"',
                    "seed = 3",
                    f'output_dir = "{tmp_path / "out"}"',
                    "[encoder]",
                    "dimension = 16",
                    "[dqn]",
                    "num_episodes = 5",
                ]
            )
        )
        config = RunConfig.from_file(str(toml))
        assert config.seed == 3
        assert config.algo_section == {"num_episodes": 5}


class TestTrainDispatch:
    def test_dqn_deterministic_artifact_digest(self, tmp_path):
        payload = base_payload(tmp_path, algo_section={"num_episodes": 25})
        result_a = train(RunConfig.from_dict(payload))
        digest_a = result_a.artifact_digest
        result_b = train(RunConfig.from_dict(payload))
        assert result_b.artifact_digest == digest_a
        assert result_b.metrics_digest == result_a.metrics_digest

    def test_aggregate_mode_flags_and_seed_independence(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        pay_a = base_payload(out_a, mode="aggregate", seed=1, algo_section={"num_episodes": 30})
        pay_b = base_payload(out_b, mode="aggregate", seed=999, algo_section={"num_episodes": 30})
        res_a = train(RunConfig.from_dict(pay_a))
        res_b = train(RunConfig.from_dict(pay_b))
        assert res_a.meta["env_deterministic"] is True
        assert res_a.meta["env_rng_draws"] == 0
        trace_a = (out_a / "out" / "env_trace.jsonl").read_bytes()
        trace_b = (out_b / "out" / "env_trace.jsonl").read_bytes()
        assert trace_a == trace_b
        assert res_a.artifact_digest == res_b.artifact_digest

    def test_offline_without_logs_is_config_error(self, tmp_path):
        payload = base_payload(tmp_path, mode="offline", algo_section={"num_episodes": 5})
        with pytest.raises(ConfigError, match="run.logs"):
            train(RunConfig.from_dict(payload))

    def test_offline_with_empty_logs_is_no_training_data(self, tmp_path):
        logs = tmp_path / "logs"
        logs.mkdir()
        (logs / "empty.jsonl").write_text("")
        payload = base_payload(tmp_path, mode="offline")
        payload["run"]["logs"] = str(logs)
        with pytest.raises(DataError, match="no training data"):
            train(RunConfig.from_dict(payload))

    def test_offline_dqn_trains_from_logs(self, tmp_path, toyshop):
        episodes = [
            Episode(
                segment="walkin",
                turns=(
                    TurnRecord("browsing", "greet", "hello, looking for a gift", 0.0),
                    TurnRecord("engaged", "probe", "it's for my nephew", 0.0),
                    TurnRecord("needs_known", "pitch_basic", "that sounds right", 0.0),
                    TurnRecord("primed_warm", "close", "yes, let's do it", 1.0),
                ),
                converted=1,
            )
        ] * 50
        logs = tmp_path / "logs"
        write_episodes(str(logs / "run.jsonl"), episodes)
        payload = base_payload(tmp_path, mode="offline")
        payload["run"]["logs"] = str(logs)
        payload["dqn"] = {"offline_updates": 300, "batch_size": 16}
        result = train(RunConfig.from_dict(payload))
        assert result.meta["offline_transitions"] == 200
        artifact = PolicyArtifact.load(result.artifact_path)
        assert artifact.algo == "dqn"

    def test_ppo_offline_rejected(self, tmp_path):
        payload = base_payload(tmp_path, algo="ppo", mode="offline")
        with pytest.raises(ConfigError, match="ppo"):
            train(RunConfig.from_dict(payload))


class TestEvaluate:
    def test_zero_episodes_rejected(self, toyshop):
        artifact = constant_policy_artifact(5)
        with pytest.raises(ConfigError):
            evaluate(artifact, toyshop["spec"], toyshop["catalog"], toyshop["rules"], 0, 1)

    def test_fingerprint_mismatch_rejected(self, toyshop):
        artifact = constant_policy_artifact(5)
        with pytest.raises(FingerprintMismatchError):
            evaluate(
                artifact, toyshop["spec"], toyshop["catalog"], toyshop["rules"], 5, 1,
                encoder=EncoderConfig(dimension=64),
            )

    def test_always_fallback_policy_matches_exact_evaluation(self, toyshop):
        # The all-fallback policy stalls to the turn budget and never
        # converts; exact policy evaluation on the explicit MDP is the
        # oracle for both the mean return and the conversion rate.
        spec, cat, rules = toyshop["spec"], toyshop["catalog"], toyshop["rules"]
        artifact = constant_policy_artifact(cat.fallback_index)
        n = 3000
        report = evaluate(artifact, spec, cat, rules, n, seed=4)
        exact_returns, exact_convs = [], []
        for segment in sorted(spec.segments):
            mdp = enumerate_mdp(spec, cat, segment, rules)
            policy = np.zeros((mdp.n_states, mdp.n_actions))
            policy[:, cat.fallback_index] = 1.0
            pe = policy_evaluation(mdp, policy)
            exact_returns.append(pe.state_values[mdp.start_index])
            exact_convs.append(pe.conversion[mdp.start_index])
        assert report.conversion_rate == pytest.approx(np.mean(exact_convs), abs=1e-12)
        assert report.mean_return == pytest.approx(np.mean(exact_returns), abs=1e-9)
        assert report.mean_turns == spec.max_turns
        assert report.compliance_violations == 0

    def test_oracle_greedy_policy_reaches_optimal_conversion(self, toyshop):
        # Roll out the value-iteration policy via its per-(phase, turn)
        # action table and compare against exact policy evaluation.
        spec, cat, rules = toyshop["spec"], toyshop["catalog"], toyshop["rules"]
        n = 4000
        for segment in sorted(spec.segments):
            mdp = enumerate_mdp(spec, cat, segment, rules)
            vi = value_iteration(mdp)
            pe = policy_evaluation(mdp, greedy_policy_matrix(mdp, vi.greedy))
            env = DialogueEnv(spec, cat, seed=[4, int(segment == "loyal")])
            mc = 0
            for _ in range(n // 2):
                state = env.reset(segment)
                while True:
                    action = int(vi.greedy[mdp.state_index(state.phase_key, state.turn)])
                    out = env.step(state, cat[action].id)
                    if out.info.get("converted"):
                        mc += 1
                    if out.done:
                        break
                    state = out.next_state
            p = pe.conversion[mdp.start_index]
            sigma = np.sqrt(p * (1 - p) / (n // 2))
            assert abs(mc / (n // 2) - p) < 3 * sigma, segment

    def test_per_segment_breakdown_counts(self, toyshop):
        artifact = constant_policy_artifact(5)
        report = evaluate(artifact, toyshop["spec"], toyshop["catalog"], toyshop["rules"], 10, 2)
        assert report.per_segment["walkin"]["episodes"] == 5
        assert report.per_segment["loyal"]["episodes"] == 5


class TestAbCompare:
    def test_degenerate_split_is_significant(self, toyshop):
        spec, cat, rules = toyshop["spec"], toyshop["catalog"], toyshop["rules"]
        # close-then-stop at turn >= 1 converts sometimes; fallback never.
        always_fallback = constant_policy_artifact(cat.fallback_index)
        # Build an artifact that always converts: close is blocked at turn 0,
        # so force "greet then close"; closing from engaged converts at 0.1.
        # For a *degenerate* check instead craft spec-free certainty:
        # compare fallback against itself for the zero-lift side.
        result = ab_compare(always_fallback, always_fallback, spec, cat, rules, 50, seed=5)
        assert result.lift == 0.0
        assert not result.significant

    def test_zero_episodes_rejected(self, toyshop):
        artifact = constant_policy_artifact(5)
        with pytest.raises(ConfigError):
            ab_compare(artifact, artifact, toyshop["spec"], toyshop["catalog"], toyshop["rules"], 0, 1)

    def test_known_difference_detected(self, toyshop):
        spec, cat, rules = toyshop["spec"], toyshop["catalog"], toyshop["rules"]
        fallback = constant_policy_artifact(cat.fallback_index)
        closer = constant_policy_artifact(cat.index("close"))
        result = ab_compare(closer, fallback, spec, cat, rules, 400, seed=5)
        assert result.conversion_b == 0.0
        assert result.conversion_a > 0.05
        assert result.significant
        assert result.ci_low > 0.0


class TestCli:
    def test_train_eval_ab_roundtrip(self, tmp_path, capsys):
        from talktrack.cli import main

        toml = tmp_path / "run.toml"
        toml.write_text(
            "\n".join(
                [
                    "[run]",
                    'scenario = "toyshop"',
                    'catalog = "toyshop"',
                    'rules = "toyshop"',
                    'algo = "dqn"',
                    "seed = 3",
                    f'output_dir = "{tmp_path / "out"}"',
                    "[encoder]",
                    "dimension = 16",
                    "[dqn]",
                    "num_episodes = 40",
                ]
            )
        )
        assert main(["train", "-c", str(toml)]) == 0
        artifact_path = str(tmp_path / "out" / "artifact.json")
        assert os.path.exists(artifact_path)
        capsys.readouterr()
        code = main(["eval", "-a", artifact_path, "-s", "toyshop", "-n", "40", "--seed", "2"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["episodes"] == 40
        assert report["compliance_violations"] == 0
        code = main(["ab", "-a", artifact_path, "-b", artifact_path, "-s", "toyshop", "-n", "30"])
        assert code == 0
        ab = json.loads(capsys.readouterr().out)
        assert "lift" in ab

    def test_exit_code_2_on_config_error(self, tmp_path, capsys):
        from talktrack.cli import main

        toml = tmp_path / "bad.toml"
        toml.write_text('[run]\nalgo = "dqn"\n')
        assert main(["train", "-c", str(toml)]) == 2

    def test_exit_code_3_on_data_error(self, tmp_path, capsys):
        from talktrack.cli import main

        assert main(["ingest", str(tmp_path / "missing.jsonl")]) == 3

    def test_ingest_reports_errors(self, tmp_path, capsys):
        from talktrack.cli import main

        log = tmp_path / "log.jsonl"
        log.write_text('{"segment": "walkin", "turns": [{"phase": "p", "action_id": "a", "reply": "r", "reward": 0.0}], "converted": 1}\nnot json\n')
        assert main(["ingest", str(log)]) == 0
        out = capsys.readouterr().out
        assert "episodes: 1" in out
        assert "errors:   1" in out
        assert "line 2" in out

    def test_byte_identical_rerun_of_cli_train(self, tmp_path):
        from talktrack.cli import main

        toml = tmp_path / "run.toml"
        toml.write_text(
            "\n".join(
                [
                    "[run]",
                    'scenario = "toyshop"',
                    'catalog = "toyshop"',
                    'rules = "toyshop"',
                    'algo = "ppo"',
                    "seed = 4",
                    f'output_dir = "{tmp_path / "out"}"',
                    "[encoder]",
                    "dimension = 16",
                    "[ppo]",
                    "num_iterations = 2",
                    "rollout_episodes = 4",
                ]
            )
        )
        assert main(["train", "-c", str(toml)]) == 0
        first = file_digest(str(tmp_path / "out" / "metrics.jsonl"))
        first_art = file_digest(str(tmp_path / "out" / "artifact.json"))
        assert main(["train", "-c", str(toml)]) == 0
        assert file_digest(str(tmp_path / "out" / "metrics.jsonl")) == first
        assert file_digest(str(tmp_path / "out" / "artifact.json")) == first_art
