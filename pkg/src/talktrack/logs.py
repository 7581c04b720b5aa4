"""Episode logging, offline log ingestion, and historical aggregation.

Episode logs are JSON lines, one episode per line:

    {"segment": "walkin",
     "turns": [{"phase": "...", "action_id": "...", "reply": "...", "reward": 0.0}, ...],
     "converted": 0 | 1}

The schema has no field for a user identifier, so logs cannot carry one.
Aggregation groups turns by (phase, turn index) and yields the reply
frequency table, modal reply, and mean episode conversion per action.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dialogue import ActionCatalog
from .errors import DataError


@dataclass(frozen=True)
class TurnRecord:
    phase: str
    action_id: str
    reply: str
    reward: float


@dataclass(frozen=True)
class Episode:
    segment: str
    turns: tuple[TurnRecord, ...]
    converted: int

    def __post_init__(self):
        if self.converted not in (0, 1):
            raise ValueError("converted must be 0 or 1")
        if not self.turns:
            raise ValueError("episode needs at least one turn")


def episode_to_json(episode: Episode) -> dict:
    return {
        "segment": episode.segment,
        "turns": [
            {"phase": t.phase, "action_id": t.action_id, "reply": t.reply, "reward": t.reward}
            for t in episode.turns
        ],
        "converted": episode.converted,
    }


def episode_from_json(payload: dict) -> Episode:
    try:
        turns = tuple(
            TurnRecord(
                phase=str(t["phase"]),
                action_id=str(t["action_id"]),
                reply=str(t["reply"]),
                reward=float(t["reward"]),
            )
            for t in payload["turns"]
        )
        return Episode(
            segment=str(payload["segment"]),
            turns=turns,
            converted=int(payload["converted"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed episode: {exc}") from exc


def write_episodes(path: str, episodes: Iterable[Episode]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for episode in episodes:
            fh.write(json.dumps(episode_to_json(episode), sort_keys=True) + "\n")


@dataclass
class IngestReport:
    episodes: list[Episode]
    errors: list[tuple[int, str]]  # (1-based line number, message)
    total_lines: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors


def ingest_log(path: str) -> IngestReport:
    """Parse one episode-log file.

    Malformed lines are collected with their line numbers and reported;
    they never silently disappear.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read log file {path}: {exc}") from exc
    report = IngestReport(episodes=[], errors=[])
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        report.total_lines += 1
        try:
            payload = json.loads(line)
            report.episodes.append(episode_from_json(payload))
        except (json.JSONDecodeError, DataError) as exc:
            report.errors.append((lineno, str(exc)))
    return report


def ingest_dir(directory: str) -> IngestReport:
    """Ingest every *.jsonl file in a directory (sorted for determinism)."""
    if not os.path.isdir(directory):
        raise DataError(f"log directory {directory} does not exist")
    merged = IngestReport(episodes=[], errors=[])
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".jsonl"):
            continue
        report = ingest_log(os.path.join(directory, name))
        merged.episodes.extend(report.episodes)
        merged.errors.extend(report.errors)
        merged.total_lines += report.total_lines
    return merged


@dataclass
class AggregateCell:
    reply_counts: Counter = field(default_factory=Counter)
    conversion_sum: float = 0.0
    episode_count: int = 0

    @property
    def modal_reply(self) -> str:
        top = max(self.reply_counts.values())
        return min(text for text, c in self.reply_counts.items() if c == top)

    @property
    def mean_conversion(self) -> float:
        return self.conversion_sum / self.episode_count if self.episode_count else 0.0


class AggregateTable:
    """Historical statistics per (state digest, action index).

    The state digest for logged turns is "<phase>|<turn index>", the same
    grouping the simulator uses, so aggregate statistics line up with the
    scenario's dynamics entries.
    """

    def __init__(self, catalog: ActionCatalog):
        self.catalog = catalog
        self.cells: dict[tuple[str, int], AggregateCell] = {}

    def cell(self, digest: str, action_index: int) -> AggregateCell:
        key = (digest, action_index)
        if key not in self.cells:
            self.cells[key] = AggregateCell()
        return self.cells[key]

    def to_json(self) -> list[dict]:
        rows = []
        for (digest, action_index), cell in sorted(self.cells.items()):
            rows.append(
                {
                    "state_digest": digest,
                    "action_index": action_index,
                    "action_id": self.catalog[action_index].id,
                    "reply_counts": dict(sorted(cell.reply_counts.items())),
                    "modal_reply": cell.modal_reply,
                    "mean_conversion": cell.mean_conversion,
                    "episode_count": cell.episode_count,
                }
            )
        return rows


def aggregate(episodes: Sequence[Episode], catalog: ActionCatalog) -> AggregateTable:
    """Reply frequencies and mean conversion outcomes per (state, action).

    Deterministic and permutation-invariant: cells accumulate counts, and
    every episode contributes its conversion outcome to every (state,
    action) pair it visited.
    """
    table = AggregateTable(catalog)
    for episode in episodes:
        for turn_index, turn in enumerate(episode.turns):
            digest = f"{turn.phase}|{turn_index}"
            cell = table.cell(digest, catalog.index(turn.action_id))
            cell.reply_counts[turn.reply] += 1
            cell.conversion_sum += episode.converted
            cell.episode_count += 1
    return table
