import itertools

import numpy as np
import pytest

from talktrack.dialogue import ActionCatalog, Utterance
from talktrack.env import DialogueEnv, DynamicsEntry, ScenarioSpec
from talktrack.errors import OracleSizeError
from talktrack.mdp import (
    enumerate_mdp,
    greedy_policy_matrix,
    policy_evaluation,
    uniform_policy,
    value_iteration,
)


def single_catalog():
    return ActionCatalog(
        [
            Utterance("go", "do it", "close"),
            Utterance("fb", "hold on", "fallback", is_fallback=True),
        ]
    )


def single_spec():
    return ScenarioSpec(
        phases=["p"],
        segments={"s": "p"},
        eligibility={"s": ["go", "fb"]},
        max_turns=1,
        dynamics={
            ("p", "go"): DynamicsEntry((("y", 1.0),), None, 1.0, 0.0),
            ("p", "fb"): DynamicsEntry((("ok", 1.0),), "p", 0.0, 0.0),
        },
    )


def three_phase_catalog():
    return ActionCatalog(
        [
            Utterance("a0", "push forward", "pitch"),
            Utterance("a1", "hold steady", "fallback", is_fallback=True),
        ]
    )


def three_phase_spec():
    # 3 phases, 2 actions, horizon 3, rewards mixing shaping and conversion.
    return ScenarioSpec(
        phases=["p0", "p1", "p2"],
        segments={"s": "p0"},
        eligibility={"s": ["a0", "a1"]},
        max_turns=3,
        conversion_value=1.0,
        dynamics={
            ("p0", "a0"): DynamicsEntry((("r", 1.0),), "p1", 0.0, 0.1),
            ("p0", "a1"): DynamicsEntry((("r", 1.0),), "p0", 0.0, 0.02),
            ("p1", "a0"): DynamicsEntry((("r", 1.0),), "p2", 0.0, 0.05),
            ("p1", "a1"): DynamicsEntry((("r", 1.0),), None, 0.3, 0.0),
            ("p2", "a0"): DynamicsEntry((("r", 1.0),), None, 0.9, -0.05),
            ("p2", "a1"): DynamicsEntry((("r", 1.0),), "p2", 0.0, 0.01),
        },
    )


class TestEnumerate:
    def test_single_phase_single_turn_two_states(self):
        mdp = enumerate_mdp(single_spec(), single_catalog(), "s")
        assert mdp.n_states == 1
        assert mdp.terminal_index == 1  # grid state + terminal

    def test_toyshop_state_count(self, toyshop):
        spec = toyshop["spec"]
        mdp = enumerate_mdp(spec, toyshop["catalog"], "walkin", toyshop["rules"])
        assert mdp.n_states == len(spec.phases) * spec.max_turns

    def test_cap_enforced(self, toyshop):
        with pytest.raises(OracleSizeError):
            enumerate_mdp(toyshop["spec"], toyshop["catalog"], "walkin", cap=10)

    def test_eligibility_and_compliance_shape_the_mask(self, toyshop):
        mdp = enumerate_mdp(toyshop["spec"], toyshop["catalog"], "walkin", toyshop["rules"])
        cat = toyshop["catalog"]
        start_allowed = {cat[a].id for a in mdp.allowed_actions(mdp.start_index)}
        # turn-0 rule blocks pitch/close; walkin eligibility excludes pitch_deluxe
        assert start_allowed == {"greet", "probe", "clarify"}
        turn1 = mdp.state_index("browsing", 1)
        allowed1 = {cat[a].id for a in mdp.allowed_actions(turn1)}
        assert allowed1 == {"greet", "probe", "pitch_basic", "close", "clarify"}

    def test_expected_reward_matches_monte_carlo(self):
        spec = three_phase_spec()
        cat = three_phase_catalog()
        mdp = enumerate_mdp(spec, cat, "s")
        env = DialogueEnv(spec, cat, seed=77)
        n = 100_000
        state = env.reset("s")
        # (p1, a1) is a stochastic terminal entry: conversion Bernoulli(0.3).
        probe = env.step(state, "a0").next_state
        rewards = np.empty(n)
        for i in range(n):
            rewards[i] = env.step(probe, "a1").reward
        s = mdp.state_index("p1", 1)
        a = cat.index("a1")
        exact = mdp.reward[s, a]
        sem = rewards.std(ddof=1) / np.sqrt(n)
        assert abs(rewards.mean() - exact) < 3 * sem


class TestValueIteration:
    def test_single_state_single_action(self):
        mdp = enumerate_mdp(single_spec(), single_catalog(), "s")
        result = value_iteration(mdp, gamma=1.0)
        assert result.q_values[0, 0] == pytest.approx(1.0)
        assert result.state_values[0] == pytest.approx(1.0)
        assert result.greedy[0] == 0

    def test_gamma_zero_gives_expected_immediate_reward(self):
        spec = three_phase_spec()
        mdp = enumerate_mdp(spec, three_phase_catalog(), "s")
        result = value_iteration(mdp, gamma=0.0)
        for s in range(mdp.n_states):
            for a in mdp.allowed_actions(s):
                assert result.q_values[s, a] == pytest.approx(mdp.reward[s, a])

    def test_matches_brute_force_expectimax(self):
        # Independent oracle: enumerate every action sequence (deterministic
        # phase transitions make each sequence a single trajectory).
        spec = three_phase_spec()
        cat = three_phase_catalog()
        mdp = enumerate_mdp(spec, cat, "s")
        result = value_iteration(mdp, gamma=1.0)

        def rollout_value(phase, turn, actions):
            if turn >= spec.max_turns or phase is None:
                return 0.0, True
            if not actions:
                return 0.0, False
            entry = spec.entry(phase, cat[actions[0]].id)
            value = entry.expected_reward(spec.conversion_value)
            rest, _ = rollout_value(entry.next_phase, turn + 1, actions[1:])
            return value + rest, True

        for turn in range(spec.max_turns):
            horizon = spec.max_turns - turn
            for phase in spec.phases:
                best = max(
                    rollout_value(phase, turn, seq)[0]
                    for seq in itertools.product(range(2), repeat=horizon)
                )
                s = mdp.state_index(phase, turn)
                assert result.state_values[s] == pytest.approx(best, abs=1e-12), (phase, turn)

    def test_greedy_ties_break_to_lowest_index(self):
        spec = ScenarioSpec(
            phases=["p"],
            segments={"s": "p"},
            eligibility={"s": ["go", "fb"]},
            max_turns=1,
            dynamics={
                ("p", "go"): DynamicsEntry((("y", 1.0),), None, 0.5, 0.0),
                ("p", "fb"): DynamicsEntry((("ok", 1.0),), None, 0.5, 0.0),
            },
        )
        result = value_iteration(enumerate_mdp(spec, single_catalog(), "s"))
        assert result.greedy[0] == 0

    def test_gamma_validated(self):
        mdp = enumerate_mdp(single_spec(), single_catalog(), "s")
        with pytest.raises(ValueError):
            value_iteration(mdp, gamma=1.5)
        with pytest.raises(ValueError):
            value_iteration(mdp, tol=0.0)


class TestPolicyEvaluation:
    def test_greedy_policy_reproduces_optimal_value(self, toyshop):
        mdp = enumerate_mdp(toyshop["spec"], toyshop["catalog"], "walkin", toyshop["rules"])
        vi = value_iteration(mdp)
        pe = policy_evaluation(mdp, greedy_policy_matrix(mdp, vi.greedy))
        assert pe.state_values[mdp.start_index] == pytest.approx(
            vi.state_values[mdp.start_index], abs=1e-12
        )

    def test_uniform_policy_matches_sampled_mean(self, toyshop):
        # Cheap version of the sampling-consistency acceptance criterion.
        spec, cat, rules = toyshop["spec"], toyshop["catalog"], toyshop["rules"]
        mdp = enumerate_mdp(spec, cat, "loyal", rules)
        policy = uniform_policy(mdp)
        exact = policy_evaluation(mdp, policy)
        env = DialogueEnv(spec, cat, seed=99)
        rng = np.random.default_rng(100)
        n = 20_000
        returns = np.empty(n)
        for i in range(n):
            state = env.reset("loyal")
            total = 0.0
            while True:
                s = mdp.state_index(state.phase_key, state.turn)
                allowed = mdp.allowed_actions(s)
                action = allowed[rng.integers(len(allowed))]
                out = env.step(state, cat[action].id)
                total += out.reward
                if out.done:
                    break
                state = out.next_state
            returns[i] = total
        sem = returns.std(ddof=1) / np.sqrt(n)
        assert abs(returns.mean() - exact.state_values[mdp.start_index]) < 3 * sem

    def test_rejects_probability_on_disallowed_action(self, toyshop):
        mdp = enumerate_mdp(toyshop["spec"], toyshop["catalog"], "walkin", toyshop["rules"])
        policy = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        with pytest.raises(ValueError):
            policy_evaluation(mdp, policy)
