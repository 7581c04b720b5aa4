import json
import logging

import numpy as np
import pytest

from talktrack.compliance import (
    AuditLog,
    ComplianceMonitor,
    ComplianceRule,
    ComplianceVerdict,
    check,
    load_rules,
    mask_actions,
    parse_rules,
    pattern_match,
)
from talktrack.dialogue import ActionCatalog, DialogueState, Utterance
from talktrack.errors import DataError


def catalog():
    return ActionCatalog(
        [
            Utterance("greet", "Hello and welcome", "greet"),
            Utterance("pitch", "This product has guaranteed returns", "pitch"),
            Utterance("close", "Want to buy now?", "close"),
            Utterance("fb", "Let me know how I can help", "fallback", is_fallback=True),
        ]
    )


def state(turn=0, segment="walkin", max_turns=5):
    history = (("agent", "x"), ("user", "y")) * turn
    return DialogueState(history, turn, max_turns, segment, phase_key="p")


class TestPatternMatch:
    def test_literal_substring(self):
        assert pattern_match("guaranteed returns", "This product has guaranteed returns")
        assert not pattern_match("guaranteed returns", "no guarantees here")

    def test_anchored_wildcard(self):
        assert pattern_match("This*returns", "This product has guaranteed returns")
        assert pattern_match("*guaranteed*", "has guaranteed returns")
        assert not pattern_match("This*nope", "This product has guaranteed returns")
        assert not pattern_match("returns*", "This product has guaranteed returns")

    def test_wildcard_ordering_of_middle_parts(self):
        assert pattern_match("*a*b*", "xx a yy b zz")
        assert not pattern_match("*b*a*", "xx a yy b")


class TestCheck:
    def test_banned_substring_blocks(self):
        rules = parse_rules([{"rule_id": "r1", "pattern": "guaranteed returns"}])
        verdict = check(catalog()[1], state(), rules)
        assert verdict == ComplianceVerdict(allowed=False, blocking_rule="r1")

    def test_empty_rule_set_allows(self):
        assert check(catalog()[1], state(), ()).allowed

    def test_fallback_never_blocked(self):
        match_all = parse_rules([{"rule_id": "all"}])
        cat = catalog()
        assert check(cat.fallback, state(), match_all).allowed
        assert not check(cat[0], state(), match_all).allowed

    def test_first_match_wins_in_order(self):
        rules = parse_rules(
            [
                {"rule_id": "second", "intents": ["pitch"]},
                {"rule_id": "first", "pattern": "guaranteed"},
            ]
        )
        assert check(catalog()[1], state(), rules).blocking_rule == "second"

    def test_turn_range_filter(self):
        rules = parse_rules([{"rule_id": "r", "intents": ["pitch"], "turn_min": 0, "turn_max": 0}])
        cat = catalog()
        assert not check(cat[1], state(turn=0), rules).allowed
        assert check(cat[1], state(turn=1), rules).allowed

    def test_segment_filter(self):
        rules = parse_rules([{"rule_id": "r", "segments": ["loyal"]}])
        cat = catalog()
        assert check(cat[0], state(segment="walkin"), rules).allowed
        assert not check(cat[0], state(segment="loyal"), rules).allowed


class TestMaskActions:
    def test_no_rules_full_set(self):
        cat = catalog()
        assert mask_actions(cat, state(), ()) == (0, 1, 2, 3)

    def test_all_blocked_leaves_fallback(self):
        cat = catalog()
        mask = mask_actions(cat, state(), parse_rules([{"rule_id": "all"}]))
        assert mask == (cat.fallback_index,)

    def test_intent_rule_masks_by_turn(self):
        cat = catalog()
        rules = parse_rules([{"rule_id": "warmup", "intents": ["pitch"], "turn_min": 0, "turn_max": 0}])
        assert 1 not in mask_actions(cat, state(turn=0), rules)
        assert 1 in mask_actions(cat, state(turn=1), rules)

    def test_mask_is_exactly_allowed_checks_plus_fallback(self):
        cat = catalog()
        rng = np.random.default_rng(4)
        intents = ["greet", "pitch", "close", "fallback"]
        for _ in range(50):
            rules = parse_rules(
                [
                    {
                        "rule_id": f"r{j}",
                        "intents": [intents[rng.integers(len(intents))]],
                        "turn_min": int(rng.integers(0, 3)),
                    }
                    for j in range(rng.integers(0, 4))
                ]
            )
            st = state(turn=int(rng.integers(0, 4)))
            mask = set(mask_actions(cat, st, rules))
            expected = {i for i in range(len(cat)) if check(cat[i], st, rules).allowed}
            expected.add(cat.fallback_index)
            assert mask == expected

    def test_adding_a_rule_never_enlarges_mask(self):
        cat = catalog()
        rng = np.random.default_rng(11)
        pool = [
            {"rule_id": "a", "intents": ["pitch"]},
            {"rule_id": "b", "pattern": "buy"},
            {"rule_id": "c", "turn_min": 1},
            {"rule_id": "d", "segments": ["walkin"]},
            {"rule_id": "e", "pattern": "*welcome"},
        ]
        for _ in range(30):
            k = int(rng.integers(0, len(pool)))
            chosen = [pool[int(i)] for i in rng.permutation(len(pool))[:k]]
            rules = parse_rules(chosen)
            st = state(turn=int(rng.integers(0, 3)))
            base = set(mask_actions(cat, st, rules))
            for extra in pool:
                if any(r["rule_id"] == extra["rule_id"] for r in chosen):
                    continue
                grown = parse_rules(chosen + [extra])
                assert set(mask_actions(cat, st, grown)) <= base


class TestLoadRules:
    def test_load_and_fallback_warning(self, tmp_path, caplog):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([{"rule_id": "all"}]))
        with caplog.at_level(logging.WARNING):
            rules = load_rules(str(path), catalog())
        assert len(rules) == 1
        assert any("fallback" in rec.message for rec in caplog.records)

    def test_duplicate_rule_ids_rejected(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([{"rule_id": "x"}, {"rule_id": "x"}]))
        with pytest.raises(DataError):
            load_rules(str(path))

    def test_unknown_fields_rejected(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([{"rule_id": "x", "regex": ".*"}]))
        with pytest.raises(DataError):
            load_rules(str(path))


class TestMonitorAndAudit:
    def test_blocked_execution_is_counted_and_audited(self, tmp_path):
        audit = AuditLog(str(tmp_path / "audit.jsonl"))
        monitor = ComplianceMonitor(parse_rules([{"rule_id": "nopitch", "intents": ["pitch"]}]), audit)
        cat = catalog()
        verdict = monitor.verify_executed(cat[1], state())
        assert not verdict.allowed
        assert monitor.violations == 1
        lines = (tmp_path / "audit.jsonl").read_text().splitlines()
        event = json.loads(lines[0])
        assert event["rule_id"] == "nopitch"
        assert event["action_id"] == "pitch"
        assert event["origin"] == "agent"

    def test_masked_selection_never_violates(self):
        rules = parse_rules([{"rule_id": "r", "intents": ["pitch", "close"]}])
        monitor = ComplianceMonitor(rules)
        cat = catalog()
        st = state()
        for i in mask_actions(cat, st, rules):
            monitor.verify_executed(cat[i], st)
        assert monitor.violations == 0
        assert monitor.audit.agent_blocks() == []
