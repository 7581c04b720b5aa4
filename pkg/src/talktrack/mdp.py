"""Exact finite-MDP extraction and solvers, used as testing oracles.

A scenario restricted to one segment induces a small explicit MDP over
(phase, turn) grid states: transitions are deterministic given the action
(replies only vary the surface text), rewards are expectations over the
conversion draw. Value iteration and exact policy evaluation on this MDP
provide the ground truth that trained agents are graded against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compliance import ComplianceRule, mask_actions
from .dialogue import AGENT, USER, ActionCatalog, DialogueState
from .env import ScenarioSpec
from .errors import OracleSizeError

DEFAULT_STATE_CAP = 10_000


def probe_state(
    spec: ScenarioSpec, segment_id: str, phase: str, turn: int
) -> DialogueState:
    """Placeholder state at (segment, phase, turn) with filler history.

    Compliance rules only read the candidate utterance, segment, and turn,
    so filler history entries do not affect mask computation.
    """
    filler = ((AGENT, ""), (USER, "")) * turn
    return DialogueState(
        history=filler,
        turn=turn,
        max_turns=spec.max_turns,
        segment_id=segment_id,
        phase_key=phase,
    )


@dataclass(frozen=True)
class ExplicitMdp:
    """Finite MDP over (phase, turn) states for a single segment.

    State indices 0..len(states)-1 are grid states; ``terminal_index`` is
    the absorbing terminal. ``next_state`` and ``reward`` are only
    meaningful where ``allowed_mask`` is True.
    """

    segment_id: str
    states: tuple[tuple[str, int], ...]
    n_actions: int
    next_state: np.ndarray  # (S, A) int, target index or terminal_index
    reward: np.ndarray  # (S, A) expected reward (immediate + conversion)
    conversion: np.ndarray  # (S, A) probability of a conversion event
    allowed_mask: np.ndarray  # (S, A) bool
    start_index: int

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def terminal_index(self) -> int:
        return len(self.states)

    def state_index(self, phase: str, turn: int) -> int:
        return self.states.index((phase, turn))

    def allowed_actions(self, state_index: int) -> tuple[int, ...]:
        return tuple(np.flatnonzero(self.allowed_mask[state_index]))

    def reachable_indices(self) -> tuple[int, ...]:
        """States reachable from the start under any allowed action sequence."""
        seen = {self.start_index}
        frontier = [self.start_index]
        while frontier:
            s = frontier.pop()
            for a in np.flatnonzero(self.allowed_mask[s]):
                nxt = int(self.next_state[s, a])
                if nxt != self.terminal_index and nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return tuple(sorted(seen))


def enumerate_mdp(
    spec: ScenarioSpec,
    catalog: ActionCatalog,
    segment_id: str,
    rules: Sequence[ComplianceRule] = (),
    cap: int = DEFAULT_STATE_CAP,
) -> ExplicitMdp:
    """Exact MDP equivalent of sampled-mode expectations for one segment.

    Allowed actions per state are the segment's eligible actions intersected
    with the compliance mask, i.e. exactly the set an agent may draw from.
    """
    n_grid = len(spec.phases) * spec.max_turns
    if n_grid > cap:
        raise OracleSizeError(
            f"{len(spec.phases)} phases x {spec.max_turns} turns = {n_grid} "
            f"states exceeds the oracle cap of {cap}"
        )
    states = tuple(
        (phase, turn) for phase in spec.phases for turn in range(spec.max_turns)
    )
    index = {st: i for i, st in enumerate(states)}
    terminal = len(states)
    n_actions = len(catalog)

    eligible = {catalog.index(a) for a in spec.eligible_ids(segment_id)}
    next_state = np.full((len(states), n_actions), terminal, dtype=np.int64)
    reward = np.zeros((len(states), n_actions), dtype=np.float64)
    conversion = np.zeros((len(states), n_actions), dtype=np.float64)
    allowed_mask = np.zeros((len(states), n_actions), dtype=bool)

    # Compliance masks depend only on (segment, turn, utterance).
    masks_by_turn = {
        turn: set(
            mask_actions(
                catalog, probe_state(spec, segment_id, spec.phases[0], turn), rules
            )
        )
        for turn in range(spec.max_turns)
    }

    for (phase, turn), s in index.items():
        for a in range(n_actions):
            if a not in eligible or a not in masks_by_turn[turn]:
                continue
            entry = spec.entry(phase, catalog[a].id)
            allowed_mask[s, a] = True
            reward[s, a] = entry.expected_reward(spec.conversion_value)
            conversion[s, a] = entry.conversion_probability if entry.is_terminal else 0.0
            if entry.is_terminal or turn + 1 >= spec.max_turns:
                next_state[s, a] = terminal
            else:
                next_state[s, a] = index[(entry.next_phase, turn + 1)]

    return ExplicitMdp(
        segment_id=segment_id,
        states=states,
        n_actions=n_actions,
        next_state=next_state,
        reward=reward,
        conversion=conversion,
        allowed_mask=allowed_mask,
        start_index=index[(spec.start_phase(segment_id), 0)],
    )


@dataclass(frozen=True)
class ValueIterationResult:
    q_values: np.ndarray  # (S, A), -inf where disallowed
    state_values: np.ndarray  # (S,)
    greedy: np.ndarray  # (S,) int, ties -> lowest action index
    iterations: int
    residual: float

    def optimal_actions(self, state_index: int, tol: float = 1e-9) -> tuple[int, ...]:
        """All actions within tol of the optimum (exact ties included)."""
        q = self.q_values[state_index]
        best = self.state_values[state_index]
        return tuple(int(a) for a in np.flatnonzero(q >= best - tol))


def value_iteration(
    mdp: ExplicitMdp, gamma: float = 1.0, tol: float = 1e-10, max_iterations: int = 100_000
) -> ValueIterationResult:
    """Optimal Q-table and greedy policy; stops at sup-norm residual < tol.

    gamma = 1 is permitted because every episode ends within the turn
    budget, so values stay finite.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_states = mdp.n_states
    values = np.zeros(n_states + 1, dtype=np.float64)  # trailing slot: terminal
    q = np.full((n_states, mdp.n_actions), -np.inf, dtype=np.float64)
    iterations = 0
    residual = np.inf
    while residual >= tol:
        iterations += 1
        if iterations > max_iterations:
            raise RuntimeError("value iteration failed to converge")
        q_new = np.where(
            mdp.allowed_mask, mdp.reward + gamma * values[mdp.next_state], -np.inf
        )
        new_values = q_new.max(axis=1)
        residual = float(np.max(np.abs(new_values - values[:n_states])))
        values[:n_states] = new_values
        q = q_new
    greedy = q.argmax(axis=1)  # first (lowest-index) maximum wins
    return ValueIterationResult(
        q_values=q,
        state_values=values[:n_states].copy(),
        greedy=greedy.astype(np.int64),
        iterations=iterations,
        residual=residual,
    )


@dataclass(frozen=True)
class PolicyEvalResult:
    state_values: np.ndarray  # (S,) expected return
    conversion: np.ndarray  # (S,) probability of ending with a conversion
    episode_length: np.ndarray  # (S,) expected number of steps

    @property
    def start_fields(self):
        return self.state_values, self.conversion, self.episode_length


def policy_evaluation(
    mdp: ExplicitMdp, policy: np.ndarray, gamma: float = 1.0, tol: float = 1e-12
) -> PolicyEvalResult:
    """Exact evaluation of a (S, A) stochastic policy on the explicit MDP.

    Policy rows must put probability only on allowed actions and sum to 1.
    Returns per-state expected return, conversion probability (undiscounted
    event probability), and expected episode length.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.shape} does not match the MDP")
    if np.any(policy[~mdp.allowed_mask] > 0):
        raise ValueError("policy puts probability on a disallowed action")
    sums = policy.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValueError("policy rows must sum to 1")

    n = mdp.n_states
    values = np.zeros(n + 1)
    conv = np.zeros(n + 1)
    length = np.zeros(n + 1)
    step_r = (policy * np.where(mdp.allowed_mask, mdp.reward, 0.0)).sum(axis=1)
    step_c = (policy * np.where(mdp.allowed_mask, mdp.conversion, 0.0)).sum(axis=1)
    for _ in range(mdp.n_states + 1):
        new_values = step_r + gamma * (policy * values[mdp.next_state]).sum(axis=1)
        new_conv = step_c + (policy * conv[mdp.next_state]).sum(axis=1)
        new_length = 1.0 + (policy * length[mdp.next_state]).sum(axis=1)
        delta = max(
            np.max(np.abs(new_values - values[:n])),
            np.max(np.abs(new_conv - conv[:n])),
            np.max(np.abs(new_length - length[:n])),
        )
        values[:n] = new_values
        conv[:n] = new_conv
        length[:n] = new_length
        if delta < tol:
            break
    return PolicyEvalResult(
        state_values=values[:n].copy(),
        conversion=conv[:n].copy(),
        episode_length=length[:n].copy(),
    )


def uniform_policy(mdp: ExplicitMdp) -> np.ndarray:
    """Uniform distribution over each state's allowed actions."""
    policy = mdp.allowed_mask.astype(np.float64)
    return policy / policy.sum(axis=1, keepdims=True)


def greedy_policy_matrix(mdp: ExplicitMdp, actions: np.ndarray) -> np.ndarray:
    """One-hot (S, A) policy from a per-state action vector."""
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), actions] = 1.0
    return policy
