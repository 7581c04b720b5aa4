"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured value next to its threshold.

Run with `pytest tests/test_acceptance.py -s` to watch the lines appear,
or plain `pytest` (the summary table prints at teardown either way).
Everything here is seeded; reruns are bit-identical.
"""

import time

import numpy as np
import pytest

import talktrack as tt
from talktrack.artifact import PolicyArtifact, file_digest
from talktrack.compliance import ComplianceMonitor
from talktrack.dialogue import EncoderConfig, encode_values
from talktrack.dqn import DqnConfig, run_dqn, _combined_mask
from talktrack.env import DialogueEnv
from talktrack.mdp import enumerate_mdp, policy_evaluation, uniform_policy, value_iteration
from talktrack.nn import backward, forward, init_mlp
from talktrack.orchestrate import (
    RunConfig,
    ab_compare,
    evaluate,
    oracle_match_fraction,
    train,
)
from talktrack.ppo import PpoConfig, clipped_objective, compute_gae, run_ppo
from talktrack.rlhf import (
    PlantedUtility,
    RewardModelConfig,
    SftConfig,
    collect_probe_states,
    mean_argmax_score,
    mean_policy_score,
    mean_total_variation,
    reward_model_train,
    rlhf_finetune,
    sft_train,
    synthesize_expert_dialogues,
    synthesize_preferences,
)

ENCODER = EncoderConfig(dimension=32)
_RESULTS = []


def record(number, name, passed, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(line)
    _RESULTS.append(line)
    assert passed, line


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\n" + "\n".join(_RESULTS))


@pytest.fixture(scope="module")
def world(toyshop):
    return toyshop["spec"], toyshop["catalog"], toyshop["rules"]


@pytest.fixture(scope="module")
def suite_monitor(toyshop):
    """Shared compliance monitor + episode counter across the whole suite
    (criterion 6 audits it at the end)."""
    return {"monitor": ComplianceMonitor(toyshop["rules"]), "episodes": 0}


@pytest.fixture(scope="module")
def dqn_artifact(world, suite_monitor):
    spec, catalog, rules = world
    artifact, _ = run_dqn(
        spec, catalog, rules, DqnConfig(), ENCODER, seed=7, monitor=suite_monitor["monitor"]
    )
    suite_monitor["episodes"] += DqnConfig().num_episodes
    return artifact


@pytest.fixture(scope="module")
def ppo_artifact(world, suite_monitor):
    spec, catalog, rules = world
    cfg = PpoConfig()
    artifact, _ = run_ppo(
        spec, catalog, rules, cfg, ENCODER, seed=7, monitor=suite_monitor["monitor"]
    )
    suite_monitor["episodes"] += cfg.num_iterations * cfg.rollout_episodes
    return artifact


@pytest.fixture(scope="module")
def rlhf_pipeline(world, suite_monitor):
    spec, catalog, rules = world
    dialogues = synthesize_expert_dialogues(spec, catalog, rules, ENCODER, episodes=300, seed=11)
    base, _ = sft_train(dialogues, catalog, SftConfig(), ENCODER, seed=11)
    utility = PlantedUtility(dim=ENCODER.dimension, n_actions=len(catalog), seed=123)
    t0 = time.time()
    records = synthesize_preferences(
        spec, catalog, rules, utility, 5000, noise=0.1,
        rng=np.random.default_rng(43), encoder=ENCODER, min_margin=0.5, states_seed=43,
    )
    rm_result = reward_model_train(records, RewardModelConfig(), n_actions=len(catalog), seed=0)
    rm_elapsed = time.time() - t0
    probes = collect_probe_states(spec, catalog, rules, ENCODER, n=300, seed=77)
    return {
        "base": base,
        "utility": utility,
        "rm_result": rm_result,
        "rm_elapsed": rm_elapsed,
        "probes": probes,
    }


class TestAcceptance:
    def test_01_gradient_correctness(self):
        rng = np.random.default_rng(2024)
        t0 = time.time()
        worst = 0.0
        for _ in range(50):
            dims = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 4)) + 1)]
            net = init_mlp(dims, rng)
            x = rng.normal(size=dims[0])
            target = rng.normal(size=dims[-1])
            out, cache = forward(net, x)
            analytic = backward(net, cache, 2 * (out - target)).flat()
            flat = net.get_flat()
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                for sign in (1.0, -1.0):
                    bumped = flat.copy()
                    bumped[i] += sign * 1e-5
                    net.set_flat(bumped)
                    o, _ = forward(net, x)
                    numeric[i] += sign * float(np.sum((o - target) ** 2))
            numeric /= 2e-5
            net.set_flat(flat)
            denom = max(np.max(np.abs(numeric)), 1e-8)
            worst = max(worst, float(np.max(np.abs(analytic - numeric)) / denom))
        elapsed = time.time() - t0
        record(
            1, "gradient correctness",
            worst < 1e-4 and elapsed < 10.0,
            f"max rel err {worst:.2e} < 1e-4, {elapsed:.1f}s < 10s",
        )

    def test_02_dqn_oracle_match(self, world, dqn_artifact):
        spec, catalog, rules = world
        t0 = time.time()
        artifact, _ = run_dqn(spec, catalog, rules, DqnConfig(), ENCODER, seed=7)
        elapsed = time.time() - t0
        steps = artifact.meta["env_steps"]
        fraction, misses = oracle_match_fraction(artifact, spec, catalog, rules, gamma=1.0)
        record(
            2, "DQN oracle match",
            fraction >= 0.95 and steps <= 50_000 and elapsed < 120.0,
            f"optimal-action match {fraction:.1%} >= 95%, {steps} env steps <= 50k, "
            f"{elapsed:.0f}s < 120s, misses={misses}",
        )

    def test_03_ppo_oracle_return(self, world, ppo_artifact, suite_monitor):
        spec, catalog, rules = world
        t0 = time.time()
        artifact, _ = run_ppo(spec, catalog, rules, PpoConfig(), ENCODER, seed=7)
        elapsed = time.time() - t0
        optimal = np.mean(
            [
                value_iteration(enumerate_mdp(spec, catalog, seg, rules)).state_values[
                    enumerate_mdp(spec, catalog, seg, rules).start_index
                ]
                for seg in sorted(spec.segments)
            ]
        )
        report = evaluate(
            artifact, spec, catalog, rules, 2000, seed=909, monitor=suite_monitor["monitor"]
        )
        suite_monitor["episodes"] += 2000
        ratio = report.mean_return / optimal
        record(
            3, "PPO oracle return",
            ratio >= 0.9 and elapsed < 180.0,
            f"mean return {report.mean_return:.3f} = {ratio:.1%} of optimal {optimal:.3f} "
            f"(>= 90%), {PpoConfig().num_iterations} iterations <= 200, {elapsed:.0f}s < 180s",
        )

    def test_04_gae_reduction(self):
        rng = np.random.default_rng(321)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 15))
            rewards = rng.normal(size=n)
            values = rng.normal(size=n)
            dones = rng.random(n) < 0.3
            dones[-1] = True
            gamma = float(rng.uniform(0.0, 1.0))
            adv, _ = compute_gae(rewards, values, dones, gamma, gae_lambda=0.0)
            for t in range(n):
                nxt = 0.0 if (dones[t] or t + 1 == n) else values[t + 1]
                reference = rewards[t] + gamma * nxt - values[t]
                worst = max(worst, abs(adv[t] - reference))
        record(4, "GAE reduction at lambda=0", worst < 1e-12, f"max abs dev {worst:.2e} < 1e-12")

    def test_05_clip_law(self):
        rng = np.random.default_rng(99)
        n = 100_000
        ratio = rng.uniform(0.01, 3.0, size=n)
        adv = rng.normal(size=n)
        eps = rng.uniform(0.05, 0.5, size=n)
        obj = np.array([clipped_objective(r, a, e) for r, a, e in zip(ratio, adv, eps)])
        bound_ok = bool(np.all(obj <= ratio * adv + 1e-12))
        inside = np.abs(ratio - 1.0) <= eps
        equal_ok = bool(np.allclose(obj[inside], (ratio * adv)[inside], atol=1e-12))
        record(
            5, "clip law",
            bound_ok and equal_ok,
            f"min-bound holds on {n} triples; equality inside the clip band "
            f"({int(inside.sum())} samples)",
        )

    def test_07_aggregate_mode_determinism(self, tmp_path_factory):
        outputs = []
        for seed in (1, 99991):
            out = tmp_path_factory.mktemp(f"agg{seed}")
            payload = {
                "run": {
                    "scenario": "toyshop", "catalog": "toyshop", "rules": "toyshop",
                    "algo": "dqn", "mode": "aggregate", "seed": seed,
                    "output_dir": str(out),
                },
                "encoder": {"dimension": 32},
                "dqn": {"num_episodes": 400},
            }
            result = train(RunConfig.from_dict(payload))
            outputs.append(
                {
                    "trace": (out / "env_trace.jsonl").read_bytes(),
                    "artifact_digest": result.artifact_digest,
                    "rng_draws": result.meta["env_rng_draws"],
                }
            )
        record(
            7, "aggregate-mode determinism",
            outputs[0]["trace"] == outputs[1]["trace"]
            and outputs[0]["artifact_digest"] == outputs[1]["artifact_digest"]
            and outputs[0]["rng_draws"] == outputs[1]["rng_draws"] == 0,
            f"seeds 1 vs 99991: identical env traces ({len(outputs[0]['trace'])} bytes), "
            f"identical artifacts, 0 environment RNG draws",
        )

    def test_08_reward_model_accuracy(self, rlhf_pipeline):
        result = rlhf_pipeline["rm_result"]
        elapsed = rlhf_pipeline["rm_elapsed"]
        record(
            8, "reward-model accuracy",
            result.held_out_accuracy >= 0.9 and elapsed < 60.0,
            f"held-out accuracy {result.held_out_accuracy:.4f} >= 0.9 on "
            f"{result.n_held_out} records (noise 0.1, margin >= 0.5), {elapsed:.0f}s < 60s",
        )

    def test_09_rlhf_improvement(self, world, rlhf_pipeline, suite_monitor):
        spec, catalog, rules = world
        base = rlhf_pipeline["base"]
        rm = rlhf_pipeline["rm_result"].model
        utility = rlhf_pipeline["utility"]
        probes = rlhf_pipeline["probes"]
        cfg = PpoConfig(entropy_coef=0.0, num_iterations=60, rollout_episodes=32)
        base_score = mean_policy_score(base, rm, probes)
        oracle_score = mean_argmax_score(rm, utility, probes)
        artifact, _ = rlhf_finetune(base, rm, spec, catalog, rules, cfg, ENCODER, seed=3,
                                    kl_coef=0.02)
        suite_monitor["episodes"] += cfg.num_iterations * cfg.rollout_episodes
        tuned_score = mean_policy_score(artifact.networks["policy"], rm, probes)
        closed = (tuned_score - base_score) / (oracle_score - base_score)
        pinned, _ = rlhf_finetune(base, rm, spec, catalog, rules, cfg, ENCODER, seed=3,
                                  kl_coef=1e3)
        tv = mean_total_variation(pinned.networks["policy"], base, probes)
        record(
            9, "RLHF improvement",
            tuned_score > base_score and closed >= 0.2 and tv < 0.05,
            f"tuned {tuned_score:.3f} > base {base_score:.3f}, closed {closed:.1%} of gap to "
            f"oracle {oracle_score:.3f} (>= 20%); TV to base at kl_coef=1e3: {tv:.4f} < 0.05",
        )

    def test_10_sampling_consistency(self, world, suite_monitor):
        spec, catalog, rules = world
        monitor = suite_monitor["monitor"]
        exact_by_segment = {}
        for segment in sorted(spec.segments):
            mdp = enumerate_mdp(spec, catalog, segment, rules)
            pe = policy_evaluation(mdp, uniform_policy(mdp))
            exact_by_segment[segment] = pe.state_values[mdp.start_index]
        segments = sorted(spec.segments)
        n = 100_000
        env = DialogueEnv(spec, catalog, seed=[2025, 1])
        rng = np.random.default_rng([2025, 2])
        returns = np.empty(n)
        for i in range(n):
            state = env.reset(segments[i % len(segments)])
            total = 0.0
            while True:
                allowed = _combined_mask(env, catalog, rules, state)
                action = allowed[rng.integers(len(allowed))]
                monitor.verify_executed(catalog[action], state)
                out = env.step(state, catalog[action].id)
                total += out.reward
                if out.done:
                    break
                state = out.next_state
            returns[i] = total
        suite_monitor["episodes"] += n
        # n is divisible by the segment count, so the exact mixture mean is
        # the plain average of per-segment start values.
        exact = np.mean(list(exact_by_segment.values()))
        sem = returns.std(ddof=1) / np.sqrt(n)
        deviation = abs(returns.mean() - exact)
        record(
            10, "sampling consistency",
            deviation < 3 * sem,
            f"MC mean {returns.mean():.5f} vs exact {exact:.5f}, |dev| {deviation:.5f} "
            f"< 3*SE {3 * sem:.5f} over {n} episodes",
        )

    def test_11_ab_calibration(self, world, dqn_artifact, suite_monitor):
        spec, catalog, rules = world
        contains_zero = 0
        reps = 20
        n_per_arm = 300
        for rep in range(reps):
            result = ab_compare(
                dqn_artifact, dqn_artifact, spec, catalog, rules, n_per_arm, seed=1000 + rep
            )
            if result.ci_low <= 0.0 <= result.ci_high:
                contains_zero += 1
        suite_monitor["episodes"] += reps * 2 * n_per_arm
        record(
            11, "A/B calibration",
            contains_zero >= 19,
            f"{contains_zero}/{reps} identical-artifact CIs contain 0 (need >= 19)",
        )

    def test_12_determinism(self, tmp_path_factory):
        digests = []
        for attempt in ("first", "second"):
            out = tmp_path_factory.mktemp(f"det-{attempt}")
            payload = {
                "run": {
                    "scenario": "toyshop", "catalog": "toyshop", "rules": "toyshop",
                    "algo": "ppo", "mode": "online", "seed": 1234,
                    "output_dir": str(out),
                },
                "encoder": {"dimension": 32},
                "ppo": {"num_iterations": 4, "rollout_episodes": 8},
            }
            result = train(RunConfig.from_dict(payload))
            report = evaluate(
                PolicyArtifact.load(result.artifact_path), *_load_world(), 200, seed=5
            )
            digests.append(
                (result.artifact_digest, result.metrics_digest, repr(report.to_json()))
            )
        record(
            12, "determinism",
            digests[0] == digests[1],
            f"rerun artifact digest {digests[0][0][:12]}.., metrics digest "
            f"{digests[0][1][:12]}.., and eval report all byte-identical",
        )

    def test_13_compliance_zero_violation_suite_wide(self, suite_monitor, dqn_artifact,
                                                     ppo_artifact, world, rlhf_pipeline):
        # Criterion 6; runs last so the audit spans every run in the suite.
        monitor = suite_monitor["monitor"]
        record(
            6, "compliance zero-violation",
            suite_monitor["episodes"] >= 10_000
            and monitor.violations == 0
            and monitor.audit.agent_blocks() == [],
            f"{suite_monitor['episodes']} episodes, {monitor.checked} executed actions "
            f"checked, {monitor.violations} violations, "
            f"{len(monitor.audit.agent_blocks())} agent-originated audit blocks",
        )


def _load_world():
    paths = tt.toyshop_paths()
    catalog = tt.load_catalog(paths["catalog"])
    return tt.load_scenario(paths["scenario"]), catalog, tt.load_rules(paths["rules"], catalog)
