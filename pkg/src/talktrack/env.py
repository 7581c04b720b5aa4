"""Simulated-user dialogue environment.

A :class:`ScenarioSpec` declares the whole world: phases, per-(phase, action)
reply distributions and transitions, terminal conversion probabilities, an
immediate shaping reward, per-segment start phases, eligibility filters, and
the turn budget. The environment supports two feedback modes:

* sampled  -- replies drawn from the distribution, conversion is a Bernoulli
  draw at terminal transitions (one episode of one simulated user);
* aggregate -- modal reply and expected conversion, a pure function that
  consumes no randomness (training against historical statistics).

Conversion reward is delayed: it is only paid on a transition whose
``next_phase`` is terminal. Running out of turns ends the episode with no
conversion reward (disengagement).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .dialogue import AGENT, USER, ActionCatalog, DialogueState
from .errors import DataError, EligibilityError, EpisodeProtocolError

_PROB_TOL = 1e-9


@dataclass(frozen=True)
class DynamicsEntry:
    replies: tuple[tuple[str, float], ...]
    next_phase: str | None  # None marks a terminal transition
    conversion_probability: float
    immediate_reward: float

    def __post_init__(self):
        if not self.replies:
            raise DataError("dynamics entry needs at least one reply")
        total = sum(p for _, p in self.replies)
        if abs(total - 1.0) > _PROB_TOL:
            raise DataError(f"reply probabilities sum to {total!r}, expected 1")
        if any(p < 0 for _, p in self.replies):
            raise DataError("reply probabilities must be non-negative")
        if not 0.0 <= self.conversion_probability <= 1.0:
            raise DataError(
                f"conversion_probability {self.conversion_probability} outside [0, 1]"
            )

    @property
    def is_terminal(self) -> bool:
        return self.next_phase is None

    @property
    def modal_reply(self) -> str:
        # Highest probability wins; ties break to the lexicographically
        # smallest reply text so aggregate mode is platform-independent.
        best_p = max(p for _, p in self.replies)
        return min(text for text, p in self.replies if p == best_p)

    def expected_reward(self, conversion_value: float) -> float:
        extra = self.conversion_probability * conversion_value if self.is_terminal else 0.0
        return self.immediate_reward + extra


class ScenarioSpec:
    """Immutable description of the simulated dialogue MDP."""

    def __init__(
        self,
        phases: Sequence[str],
        segments: Mapping[str, str],
        eligibility: Mapping[str, Sequence[str]],
        max_turns: int,
        dynamics: Mapping[tuple[str, str], DynamicsEntry],
        conversion_value: float = 1.0,
    ):
        self.phases = tuple(phases)
        self.segments = dict(segments)
        self.eligibility = {seg: tuple(actions) for seg, actions in eligibility.items()}
        self.max_turns = int(max_turns)
        self.dynamics = dict(dynamics)
        self.conversion_value = float(conversion_value)
        self._validate()

    def _validate(self):
        if not self.phases:
            raise DataError("scenario needs at least one phase")
        if len(set(self.phases)) != len(self.phases):
            raise DataError("phase keys must be unique")
        if self.max_turns < 1:
            raise DataError("max_turns must be >= 1")
        if not self.segments:
            raise DataError("scenario needs at least one segment")
        phase_set = set(self.phases)
        for segment, start in self.segments.items():
            if start not in phase_set:
                raise DataError(f"segment {segment!r} start phase {start!r} not in phases")
            if segment not in self.eligibility:
                raise DataError(f"segment {segment!r} has no eligibility entry")
        action_union = set()
        for segment, actions in self.eligibility.items():
            if segment not in self.segments:
                raise DataError(f"eligibility names unknown segment {segment!r}")
            if not actions:
                raise DataError(f"segment {segment!r} has an empty eligible action set")
            action_union.update(actions)
        for phase in self.phases:
            for action_id in sorted(action_union):
                if (phase, action_id) not in self.dynamics:
                    raise DataError(
                        f"missing dynamics entry for phase {phase!r}, action {action_id!r}"
                    )
        for (phase, action_id), entry in self.dynamics.items():
            if phase not in phase_set:
                raise DataError(f"dynamics entry for unknown phase {phase!r}")
            if entry.next_phase is not None and entry.next_phase not in phase_set:
                raise DataError(
                    f"dynamics ({phase!r}, {action_id!r}) points at unknown phase "
                    f"{entry.next_phase!r}"
                )

    def start_phase(self, segment_id: str) -> str:
        try:
            return self.segments[segment_id]
        except KeyError:
            raise DataError(f"unknown segment {segment_id!r}") from None

    def eligible_ids(self, segment_id: str) -> tuple[str, ...]:
        try:
            return self.eligibility[segment_id]
        except KeyError:
            raise DataError(f"unknown segment {segment_id!r}") from None

    def entry(self, phase: str, action_id: str) -> DynamicsEntry:
        return self.dynamics[(phase, action_id)]

    @classmethod
    def from_json(cls, payload: dict) -> "ScenarioSpec":
        try:
            dynamics = {}
            for item in payload["dynamics"]:
                key = (str(item["phase"]), str(item["action"]))
                if key in dynamics:
                    raise DataError(f"duplicate dynamics entry for {key}")
                dynamics[key] = DynamicsEntry(
                    replies=tuple((str(t), float(p)) for t, p in item["replies"]),
                    next_phase=None if item["next_phase"] is None else str(item["next_phase"]),
                    conversion_probability=float(item["conversion_probability"]),
                    immediate_reward=float(item["immediate_reward"]),
                )
            return cls(
                phases=[str(p) for p in payload["phases"]],
                segments={str(k): str(v) for k, v in payload["segments"].items()},
                eligibility={
                    str(k): [str(a) for a in v] for k, v in payload["eligibility"].items()
                },
                max_turns=int(payload["max_turns"]),
                dynamics=dynamics,
                conversion_value=float(payload.get("conversion_value", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed scenario payload: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "phases": list(self.phases),
            "segments": dict(self.segments),
            "eligibility": {k: list(v) for k, v in self.eligibility.items()},
            "max_turns": self.max_turns,
            "conversion_value": self.conversion_value,
            "dynamics": [
                {
                    "phase": phase,
                    "action": action_id,
                    "replies": [[t, p] for t, p in entry.replies],
                    "next_phase": entry.next_phase,
                    "conversion_probability": entry.conversion_probability,
                    "immediate_reward": entry.immediate_reward,
                }
                for (phase, action_id), entry in sorted(self.dynamics.items())
            ],
        }


def load_scenario(path: str) -> ScenarioSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return ScenarioSpec.from_json(payload)


def toyshop_paths() -> dict[str, str]:
    """Filesystem paths of the bundled toyshop scenario, catalog, and rules."""
    base = resources.files("talktrack") / "data" / "toyshop"
    return {
        "scenario": str(base / "scenario.json"),
        "catalog": str(base / "catalog.json"),
        "rules": str(base / "rules.json"),
    }


@dataclass(frozen=True)
class StepOutcome:
    next_state: DialogueState
    reward: float
    done: bool
    info: dict


def reset(spec: ScenarioSpec, segment_id: str, seed: int | None = None) -> DialogueState:
    """Fresh episode state: empty history, turn 0, the segment's start phase.

    Deterministic; the seed parameter is accepted for interface symmetry with
    sampled stepping but does not influence the reset state.
    """
    del seed
    return DialogueState(
        history=(),
        turn=0,
        max_turns=spec.max_turns,
        segment_id=segment_id,
        phase_key=spec.start_phase(segment_id),
    )


class DialogueEnv:
    """One simulated user; owns its RNG, runs one episode at a time.

    ``rng_draws`` counts every random draw so aggregate-mode determinism can
    be asserted, not just assumed.
    """

    def __init__(self, spec: ScenarioSpec, catalog: ActionCatalog, seed: int | None = None):
        self.spec = spec
        self.catalog = catalog
        self._rng = np.random.default_rng(seed)
        self.rng_draws = 0
        for segment, actions in spec.eligibility.items():
            for action_id in actions:
                if action_id not in catalog:
                    raise DataError(
                        f"eligibility for segment {segment!r} names action "
                        f"{action_id!r} not in the catalog"
                    )
            if catalog.fallback.id not in actions:
                raise DataError(
                    f"segment {segment!r} must keep the fallback action eligible"
                )

    def reset(self, segment_id: str) -> DialogueState:
        return reset(self.spec, segment_id)

    def eligible_indices(self, state: DialogueState) -> tuple[int, ...]:
        return tuple(
            sorted(self.catalog.index(a) for a in self.spec.eligible_ids(state.segment_id))
        )

    def _prepare(self, state: DialogueState, action_id: str) -> DynamicsEntry:
        if state.is_terminal:
            raise EpisodeProtocolError("cannot step a terminal state")
        if action_id not in self.catalog:
            raise EligibilityError(f"unknown action {action_id!r}")
        if action_id not in self.spec.eligible_ids(state.segment_id):
            raise EligibilityError(
                f"action {action_id!r} not eligible for segment {state.segment_id!r}"
            )
        return self.spec.entry(state.phase_key, action_id)

    def _advance(
        self, state: DialogueState, action_id: str, entry: DynamicsEntry, reply: str
    ) -> tuple[DialogueState, bool]:
        next_turn = state.turn + 1
        done = entry.is_terminal or next_turn >= state.max_turns
        next_state = DialogueState(
            history=state.history
            + ((AGENT, self.catalog[self.catalog.index(action_id)].text), (USER, reply)),
            turn=next_turn,
            max_turns=state.max_turns,
            segment_id=state.segment_id,
            phase_key=entry.next_phase,
        )
        return next_state, done

    def step(self, state: DialogueState, action_id: str) -> StepOutcome:
        """Sampled mode: one reply draw, one conversion draw at terminals."""
        entry = self._prepare(state, action_id)
        reply = self._sample_reply(entry)
        reward = entry.immediate_reward
        converted = False
        if entry.is_terminal:
            self.rng_draws += 1
            converted = bool(self._rng.random() < entry.conversion_probability)
            if converted:
                reward += self.spec.conversion_value
        next_state, done = self._advance(state, action_id, entry, reply)
        return StepOutcome(
            next_state=next_state,
            reward=reward,
            done=done,
            info={"reply_text": reply, "converted": converted, "phase": entry.next_phase},
        )

    def step_aggregate(self, state: DialogueState, action_id: str) -> StepOutcome:
        """Aggregate mode: modal reply, expected conversion, zero RNG draws."""
        entry = self._prepare(state, action_id)
        reply = entry.modal_reply
        reward = entry.immediate_reward
        expected_conversion = 0.0
        if entry.is_terminal:
            expected_conversion = entry.conversion_probability
            reward += entry.conversion_probability * self.spec.conversion_value
        next_state, done = self._advance(state, action_id, entry, reply)
        return StepOutcome(
            next_state=next_state,
            reward=reward,
            done=done,
            info={
                "reply_text": reply,
                "expected_conversion": expected_conversion,
                "phase": entry.next_phase,
            },
        )

    def _sample_reply(self, entry: DynamicsEntry) -> str:
        self.rng_draws += 1
        if len(entry.replies) == 1:
            self._rng.random()  # keep draw count independent of branching
            return entry.replies[0][0]
        u = self._rng.random()
        acc = 0.0
        for text, p in entry.replies:
            acc += p
            if u < acc:
                return text
        return entry.replies[-1][0]
