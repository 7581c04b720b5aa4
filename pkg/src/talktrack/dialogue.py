"""Dialogue domain types and the deterministic state encoder.

The encoder maps a conversation context to a fixed-length float64 vector:
a hashed bag of tokens over the history (salted per speaker), two turn
features, one hashed segment slot, and a constant bias. It is a pure
function of (state, config), so every downstream training run is exactly
reproducible and checkable against an independent reimplementation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import CatalogKeyError, ConfigError, DataError
from .hashing import fnv1a64_str, sha256_digest

AGENT = "agent"
USER = "user"

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Slots appended after the token buckets: turn, remaining turns, segment, bias.
N_EXTRA_SLOTS = 4
MIN_DIMENSION = 8
_SEGMENT_BUCKETS = 64


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Utterance:
    id: str
    text: str
    intent_tag: str
    is_fallback: bool = False


class ActionCatalog:
    """Ordered pool of agent utterances; list order is the canonical
    action-index order used by every network and policy artifact."""

    def __init__(self, utterances: Sequence[Utterance]):
        utterances = tuple(utterances)
        if not utterances:
            raise DataError("action catalog must not be empty")
        ids = [u.id for u in utterances]
        if len(set(ids)) != len(ids):
            raise DataError("action catalog ids must be unique")
        fallbacks = [u for u in utterances if u.is_fallback]
        if len(fallbacks) != 1:
            raise DataError(
                f"action catalog must have exactly one fallback utterance, found {len(fallbacks)}"
            )
        self._utterances = utterances
        self._index = {u.id: i for i, u in enumerate(utterances)}
        self._fallback_index = next(i for i, u in enumerate(utterances) if u.is_fallback)

    def __len__(self) -> int:
        return len(self._utterances)

    def __iter__(self):
        return iter(self._utterances)

    def __getitem__(self, index: int) -> Utterance:
        return self._utterances[index]

    @property
    def utterances(self) -> tuple[Utterance, ...]:
        return self._utterances

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(u.id for u in self._utterances)

    @property
    def fallback_index(self) -> int:
        return self._fallback_index

    @property
    def fallback(self) -> Utterance:
        return self._utterances[self._fallback_index]

    def index(self, utterance_id: str) -> int:
        try:
            return self._index[utterance_id]
        except KeyError:
            raise CatalogKeyError(f"unknown utterance id: {utterance_id!r}") from None

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._index

    def to_json(self) -> list[dict]:
        return [
            {"id": u.id, "text": u.text, "intent_tag": u.intent_tag, "is_fallback": u.is_fallback}
            for u in self._utterances
        ]

    @classmethod
    def from_json(cls, items: Iterable[dict]) -> "ActionCatalog":
        utterances = []
        for item in items:
            try:
                utterances.append(
                    Utterance(
                        id=str(item["id"]),
                        text=str(item["text"]),
                        intent_tag=str(item["intent_tag"]),
                        is_fallback=bool(item.get("is_fallback", False)),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise DataError(f"malformed catalog entry {item!r}: {exc}") from exc
        return cls(utterances)


def load_catalog(path: str) -> ActionCatalog:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            items = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read catalog file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"catalog file {path} is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise DataError(f"catalog file {path} must hold a JSON array")
    return ActionCatalog.from_json(items)


@dataclass(frozen=True)
class DialogueState:
    """Full interaction context: history, turn budget, and segment.

    ``phase_key`` is the simulated user's hidden phase; ``None`` marks a
    terminal state. Agents only ever see the encoded vector, never the key.
    """

    history: tuple[tuple[str, str], ...]
    turn: int
    max_turns: int
    segment_id: str
    phase_key: str | None = None

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if not 0 <= self.turn <= self.max_turns:
            raise ValueError(f"turn {self.turn} outside [0, {self.max_turns}]")
        if len(self.history) not in (2 * self.turn, 2 * self.turn + 1):
            raise ValueError(
                f"history length {len(self.history)} inconsistent with turn {self.turn}"
            )
        for speaker, _ in self.history:
            if speaker not in (AGENT, USER):
                raise ValueError(f"unknown speaker {speaker!r}")

    @property
    def is_terminal(self) -> bool:
        return self.phase_key is None or self.turn >= self.max_turns

    @property
    def remaining_turns(self) -> int:
        return self.max_turns - self.turn


@dataclass(frozen=True)
class EncoderConfig:
    dimension: int = 32
    version: str = "1"

    def __post_init__(self):
        if self.dimension < MIN_DIMENSION:
            raise ConfigError(f"encoder dimension must be >= {MIN_DIMENSION}, got {self.dimension}")

    @property
    def fingerprint(self) -> str:
        return sha256_digest({"dimension": self.dimension, "version": self.version})


@dataclass(frozen=True)
class StateEncoding:
    values: np.ndarray
    encoder_fingerprint: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("state encoding contains non-finite entries")
        self.values.flags.writeable = False


def encode_state(state: DialogueState, cfg: EncoderConfig) -> StateEncoding:
    """Deterministic feature vector for one dialogue state.

    Layout: [D-4 token buckets | turn/max | remaining/max | segment slot | 1.0].
    Token buckets are 64-bit FNV-1a of "<speaker>|<token>" mod (D-4),
    normalized by the total token count over the whole history.
    """
    return StateEncoding(
        values=encode_values(state, cfg), encoder_fingerprint=cfg.fingerprint
    )


def encode_values(state: DialogueState, cfg: EncoderConfig) -> np.ndarray:
    dim = cfg.dimension
    n_buckets = dim - N_EXTRA_SLOTS
    values = np.zeros(dim, dtype=np.float64)
    total_tokens = 0
    for speaker, text in state.history:
        for token in tokenize(text):
            bucket = fnv1a64_str(f"{speaker}|{token}") % n_buckets
            values[bucket] += 1.0
            total_tokens += 1
    if total_tokens:
        values[:n_buckets] /= total_tokens
    values[dim - 4] = state.turn / state.max_turns
    values[dim - 3] = (state.max_turns - state.turn) / state.max_turns
    values[dim - 2] = (fnv1a64_str(f"segment|{state.segment_id}") % _SEGMENT_BUCKETS) / _SEGMENT_BUCKETS
    values[dim - 1] = 1.0
    return values


def state_digest(state: DialogueState) -> str:
    """Stable grouping key: (phase, turn) when the phase is known, else a
    64-bit hash of the history. Used by aggregation and audit records."""
    if state.phase_key is not None:
        return f"{state.phase_key}|{state.turn}"
    return f"h{fnv1a64_str(canonical_history(state)):016x}|{state.turn}"


def canonical_history(state: DialogueState) -> str:
    return "\x1e".join(f"{speaker}\x1f{text}" for speaker, text in state.history)


class StateEncoder(TransformerMixin, BaseEstimator):
    """sklearn-style transformer over dialogue states.

    Stateless: ``fit`` only validates the configuration, ``transform`` maps
    an iterable of :class:`DialogueState` to an (n, dimension) float64 array.
    """

    def __init__(self, dimension: int = 32, version: str = "1"):
        self.dimension = dimension
        self.version = version

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig(dimension=self.dimension, version=self.version)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    def fit(self, X=None, y=None) -> "StateEncoder":
        self.config  # validates dimension
        return self

    def transform(self, X: Iterable[DialogueState]) -> np.ndarray:
        cfg = self.config
        rows = [encode_values(state, cfg) for state in X]
        if not rows:
            return np.zeros((0, cfg.dimension), dtype=np.float64)
        return np.stack(rows)

    def encode(self, state: DialogueState) -> StateEncoding:
        return encode_state(state, self.config)
