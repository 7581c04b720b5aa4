"""Pre-execution compliance gate.

Rules block utterances by text pattern, intent, segment, and turn range.
The gate never blocks the catalog's fallback utterance, so the action mask
handed to an agent is never empty. Patterns are literal substrings, or
anchored wildcards when they contain ``*`` (no regex), so verdicts are
bit-identical across platforms.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Sequence

from .dialogue import ActionCatalog, DialogueState, Utterance, state_digest
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComplianceRule:
    """Blocks any utterance matching all of its present conditions."""

    rule_id: str
    pattern: str | None = None
    intents: frozenset[str] | None = None
    segments: frozenset[str] | None = None
    turn_min: int | None = None
    turn_max: int | None = None

    def matches(self, action: Utterance, state: DialogueState) -> bool:
        if self.pattern is not None and not pattern_match(self.pattern, action.text):
            return False
        if self.intents is not None and action.intent_tag not in self.intents:
            return False
        if self.segments is not None and state.segment_id not in self.segments:
            return False
        if self.turn_min is not None and state.turn < self.turn_min:
            return False
        if self.turn_max is not None and state.turn > self.turn_max:
            return False
        return True

    def matches_utterance(self, action: Utterance) -> bool:
        """State-independent part of the match; used for the fallback warning."""
        if self.pattern is not None and not pattern_match(self.pattern, action.text):
            return False
        if self.intents is not None and action.intent_tag not in self.intents:
            return False
        return True


@dataclass(frozen=True)
class ComplianceVerdict:
    allowed: bool
    blocking_rule: str | None = None

    def __post_init__(self):
        if self.allowed == (self.blocking_rule is not None):
            raise ValueError("blocking_rule must be present exactly when blocked")


def pattern_match(pattern: str, text: str) -> bool:
    """Literal substring, or full-text anchored match when '*' is present
    ('*' spans any run of characters, including none)."""
    if "*" not in pattern:
        return pattern in text
    parts = pattern.split("*")
    if not text.startswith(parts[0]):
        return False
    pos = len(parts[0])
    for part in parts[1:-1]:
        if part:
            found = text.find(part, pos)
            if found < 0:
                return False
            pos = found + len(part)
    last = parts[-1]
    if last and not (text.endswith(last) and len(text) - len(last) >= pos):
        return False
    return True


def check(
    action: Utterance, state: DialogueState, rules: Sequence[ComplianceRule]
) -> ComplianceVerdict:
    """First matching rule in declaration order blocks; the fallback
    utterance is never blockable."""
    if action.is_fallback:
        return ComplianceVerdict(allowed=True)
    for rule in rules:
        if rule.matches(action, state):
            return ComplianceVerdict(allowed=False, blocking_rule=rule.rule_id)
    return ComplianceVerdict(allowed=True)


def mask_actions(
    catalog: ActionCatalog, state: DialogueState, rules: Sequence[ComplianceRule]
) -> tuple[int, ...]:
    """Indices the agent may select from; always contains the fallback."""
    return tuple(
        i for i, utt in enumerate(catalog) if check(utt, state, rules).allowed
    )


def parse_rules(items: Sequence[dict]) -> tuple[ComplianceRule, ...]:
    rules = []
    seen = set()
    for item in items:
        if "rule_id" not in item:
            raise DataError(f"compliance rule missing rule_id: {item!r}")
        rule_id = str(item["rule_id"])
        if rule_id in seen:
            raise DataError(f"duplicate compliance rule_id: {rule_id}")
        seen.add(rule_id)
        unknown = set(item) - {"rule_id", "pattern", "intents", "segments", "turn_min", "turn_max"}
        if unknown:
            raise DataError(f"rule {rule_id}: unknown fields {sorted(unknown)}")
        rules.append(
            ComplianceRule(
                rule_id=rule_id,
                pattern=item.get("pattern"),
                intents=frozenset(item["intents"]) if "intents" in item else None,
                segments=frozenset(item["segments"]) if "segments" in item else None,
                turn_min=int(item["turn_min"]) if "turn_min" in item else None,
                turn_max=int(item["turn_max"]) if "turn_max" in item else None,
            )
        )
    return tuple(rules)


def load_rules(path: str, catalog: ActionCatalog | None = None) -> tuple[ComplianceRule, ...]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            items = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read rules file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"rules file {path} is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise DataError(f"rules file {path} must hold a JSON array")
    rules = parse_rules(items)
    if catalog is not None:
        fallback = catalog.fallback
        for rule in rules:
            if rule.matches_utterance(fallback):
                logger.warning(
                    "rule %s would match the fallback utterance %r; "
                    "it is ignored for the fallback",
                    rule.rule_id,
                    fallback.id,
                )
    return rules


class AuditLog:
    """Append-only JSON-lines log of block events.

    Training and evaluation record with origin="agent"; the HTTP service
    records externally submitted actions with origin="external". A None
    path keeps events in memory only (used by tests and training probes).
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.events: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    def record_block(
        self, rule_id: str, action_id: str, state: DialogueState, origin: str
    ) -> None:
        event = {
            "timestamp": time.time(),
            "rule_id": rule_id,
            "action_id": action_id,
            "state_digest": state_digest(state),
            "origin": origin,
        }
        self.events.append(event)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    def agent_blocks(self) -> list[dict]:
        return [e for e in self.events if e["origin"] == "agent"]


class ComplianceMonitor:
    """Counts executed-action compliance violations across a run.

    Every action an agent actually executes is re-checked here; a violation
    is an executed action the gate would have blocked. Policies that select
    from mask_actions output keep this counter at zero.
    """

    def __init__(self, rules: Sequence[ComplianceRule], audit: AuditLog | None = None):
        self.rules = tuple(rules)
        self.audit = audit if audit is not None else AuditLog()
        self.checked = 0
        self.violations = 0

    def verify_executed(self, action: Utterance, state: DialogueState) -> ComplianceVerdict:
        verdict = check(action, state, self.rules)
        self.checked += 1
        if not verdict.allowed:
            self.violations += 1
            self.audit.record_block(verdict.blocking_rule, action.id, state, origin="agent")
        return verdict
