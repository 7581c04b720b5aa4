"""HTTP labeling and chat service.

Serves two human-in-the-loop surfaces against a loaded policy artifact:

* a preference-labeling queue: tasks pair two high-probability candidate
  actions at a sampled dialogue state; submitted choices append to the
  preference store (fsync before acknowledging, so restarts never lose an
  acknowledged label);
* a chat sandbox where the caller plays the customer and the policy
  replies with its masked argmax action, tracked against the scenario's
  phase graph.

Single-writer concurrency: every mutation holds one lock; reads of
immutable snapshots need none. The WSGI app is plain enough to run under
wsgiref for desk use.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .artifact import PolicyArtifact
from .compliance import AuditLog, ComplianceRule, check, mask_actions
from .dialogue import AGENT, USER, ActionCatalog, DialogueState, EncoderConfig, encode_values
from .env import ScenarioSpec
from .errors import ConfigError
from .rlhf import PreferenceRecord, append_preference_record
from .dialogue import state_digest

DEFAULT_LEASE_SECONDS = 120.0


@dataclass
class LabelTask:
    task_id: str
    state: DialogueState
    candidate_a: int
    candidate_b: int
    created_ts: float
    status: str = "open"  # open | labeled
    labeled_by: str | None = None

    def view(self, catalog: ActionCatalog) -> dict:
        return {
            "task_id": self.task_id,
            "state": {
                "history": [[speaker, text] for speaker, text in self.state.history],
                "turn": self.state.turn,
                "max_turns": self.state.max_turns,
                "segment": self.state.segment_id,
            },
            "candidate_a": {"id": catalog[self.candidate_a].id, "text": catalog[self.candidate_a].text},
            "candidate_b": {"id": catalog[self.candidate_b].id, "text": catalog[self.candidate_b].text},
            "created_ts": self.created_ts,
            "status": self.status,
        }


@dataclass
class ChatSession:
    session_id: str
    state: DialogueState
    transcript: list = field(default_factory=list)
    done: bool = False

    def view(self) -> dict:
        return {
            "session_id": self.session_id,
            "segment": self.state.segment_id,
            "turn": self.state.turn,
            "max_turns": self.state.max_turns,
            "done": self.done,
            "transcript": list(self.transcript),
        }


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class FeedbackService:
    def __init__(
        self,
        artifact: PolicyArtifact,
        spec: ScenarioSpec,
        catalog: ActionCatalog,
        rules: tuple[ComplianceRule, ...],
        label_store: str,
        task_journal: str | None = None,
        session_store: str | None = None,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        generate_tasks: bool = True,
        seed: int = 0,
        clock=time.time,
        audit: AuditLog | None = None,
    ):
        encoder = artifact.encoder
        artifact.check_fingerprint(encoder)
        self.artifact = artifact
        self.spec = spec
        self.catalog = catalog
        self.rules = rules
        self.encoder = encoder
        self.label_store = label_store
        self.task_journal = task_journal
        self.session_store = session_store
        self.lease_seconds = lease_seconds
        self.generate_tasks = generate_tasks
        self.clock = clock
        self.audit = audit if audit is not None else AuditLog()
        self._lock = threading.Lock()
        self._rng = np.random.default_rng([seed, 30])
        self._tasks: dict[str, LabelTask] = {}
        self._task_order: list[str] = []
        self._leases: dict[str, tuple[str, float]] = {}
        self._sessions: dict[str, ChatSession] = {}
        self._task_counter = 0
        self._label_count = 0
        self._message_count = 0
        self._fallback_substitutions = 0
        if task_journal and os.path.exists(task_journal):
            self._replay_journal()

    # -- task journal ---------------------------------------------------------

    def _journal(self, event: dict) -> None:
        if not self.task_journal:
            return
        os.makedirs(os.path.dirname(self.task_journal) or ".", exist_ok=True)
        with open(self.task_journal, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _replay_journal(self) -> None:
        with open(self.task_journal, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["event"] == "created":
                    state = DialogueState(
                        history=tuple((s, t) for s, t in event["history"]),
                        turn=event["turn"],
                        max_turns=event["max_turns"],
                        segment_id=event["segment"],
                        phase_key=event["phase"],
                    )
                    task = LabelTask(
                        task_id=event["task_id"],
                        state=state,
                        candidate_a=event["candidate_a"],
                        candidate_b=event["candidate_b"],
                        created_ts=event["ts"],
                    )
                    self._tasks[task.task_id] = task
                    self._task_order.append(task.task_id)
                    self._task_counter = max(self._task_counter, int(event["counter"]))
                elif event["event"] == "labeled":
                    task = self._tasks.get(event["task_id"])
                    if task is not None:
                        task.status = "labeled"
                        task.labeled_by = event["annotator"]
                        self._label_count += 1

    # -- helpers --------------------------------------------------------------

    def _allowed_indices(self, state: DialogueState) -> list[int]:
        eligible = {self.catalog.index(a) for a in self.spec.eligible_ids(state.segment_id)}
        return [i for i in mask_actions(self.catalog, state, self.rules) if i in eligible]

    def _policy_action(self, state: DialogueState) -> int:
        allowed = self._allowed_indices(state)
        action = self.artifact.greedy_action(encode_values(state, self.encoder), allowed)
        verdict = check(self.catalog[action], state, self.rules)
        if not verdict.allowed:
            # Defense in depth: a blocked action submitted through the
            # service is replaced by the fallback and audited.
            self.audit.record_block(
                verdict.blocking_rule, self.catalog[action].id, state, origin="service"
            )
            self._fallback_substitutions += 1
            return self.catalog.fallback_index
        return action

    def _sample_task_state(self) -> DialogueState:
        segments = sorted(self.spec.segments)
        segment = segments[int(self._rng.integers(len(segments)))]
        state = DialogueState(
            history=(), turn=0, max_turns=self.spec.max_turns,
            segment_id=segment, phase_key=self.spec.start_phase(segment),
        )
        depth = int(self._rng.integers(0, self.spec.max_turns))
        for _ in range(depth):
            allowed = self._allowed_indices(state)
            probs = self.artifact.action_probabilities(
                encode_values(state, self.encoder), tuple(allowed)
            )
            action = int(self._rng.choice(len(probs), p=probs / probs.sum()))
            entry = self.spec.entry(state.phase_key, self.catalog[action].id)
            if entry.is_terminal:
                break
            state = DialogueState(
                history=state.history
                + ((AGENT, self.catalog[action].text), (USER, entry.modal_reply)),
                turn=state.turn + 1,
                max_turns=state.max_turns,
                segment_id=state.segment_id,
                phase_key=entry.next_phase,
            )
        return state

    def _generate_task(self) -> LabelTask:
        state = self._sample_task_state()
        allowed = self._allowed_indices(state)
        probs = self.artifact.action_probabilities(encode_values(state, self.encoder), tuple(allowed))
        ranked = sorted(allowed, key=lambda a: (-probs[a], a))
        non_fallback = [a for a in ranked if a != self.catalog.fallback_index]
        pick_from = non_fallback if len(non_fallback) >= 2 else ranked
        a, b = pick_from[0], pick_from[1]
        self._task_counter += 1
        task = LabelTask(
            task_id=f"task-{self._task_counter:06d}",
            state=state,
            candidate_a=a,
            candidate_b=b,
            created_ts=self.clock(),
        )
        self._tasks[task.task_id] = task
        self._task_order.append(task.task_id)
        self._journal(
            {
                "event": "created",
                "task_id": task.task_id,
                "counter": self._task_counter,
                "history": [[s, t] for s, t in state.history],
                "turn": state.turn,
                "max_turns": state.max_turns,
                "segment": state.segment_id,
                "phase": state.phase_key,
                "candidate_a": a,
                "candidate_b": b,
                "ts": task.created_ts,
            }
        )
        return task

    # -- label queue ----------------------------------------------------------

    def next_task(self, annotator_id: str) -> LabelTask | None:
        with self._lock:
            now = self.clock()
            self._leases = {
                tid: (who, until) for tid, (who, until) in self._leases.items() if until > now
            }
            for task_id in self._task_order:
                task = self._tasks[task_id]
                if task.status != "open":
                    continue
                lease = self._leases.get(task_id)
                if lease is not None and lease[0] != annotator_id:
                    continue
                self._leases[task_id] = (annotator_id, now + self.lease_seconds)
                return task
            if not self.generate_tasks:
                return None
            task = self._generate_task()
            self._leases[task.task_id] = (annotator_id, now + self.lease_seconds)
            return task

    def submit_label(self, task_id: str, annotator_id: str, choice: str) -> dict:
        if choice not in ("A", "B"):
            raise ServiceError(400, "bad_choice", "choice must be 'A' or 'B'")
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise ServiceError(404, "unknown_task", f"no task {task_id}")
            if task.status == "labeled":
                if task.labeled_by == annotator_id:
                    return {"task_id": task_id, "status": "labeled", "duplicate": True}
                raise ServiceError(
                    409, "conflict", f"task {task_id} already labeled by another annotator"
                )
            lease = self._leases.get(task_id)
            if lease is not None and lease[0] != annotator_id and lease[1] > self.clock():
                raise ServiceError(409, "conflict", f"task {task_id} is leased to another annotator")
            record = PreferenceRecord(
                state_digest=state_digest(task.state),
                state_enc=encode_values(task.state, self.encoder),
                action_a=task.candidate_a,
                action_b=task.candidate_b,
                choice=choice,
                annotator_id=annotator_id,
                timestamp=self.clock(),
            )
            append_preference_record(self.label_store, record, fsync=True)
            task.status = "labeled"
            task.labeled_by = annotator_id
            self._label_count += 1
            self._leases.pop(task_id, None)
            self._journal(
                {"event": "labeled", "task_id": task_id, "annotator": annotator_id,
                 "ts": record.timestamp}
            )
            return {"task_id": task_id, "status": "labeled", "duplicate": False}

    # -- chat sandbox ----------------------------------------------------------

    def chat_start(self, segment: str) -> ChatSession:
        if segment not in self.spec.segments:
            raise ServiceError(400, "unknown_segment", f"no segment {segment!r}")
        with self._lock:
            session = ChatSession(
                session_id=uuid.uuid4().hex[:12],
                state=DialogueState(
                    history=(), turn=0, max_turns=self.spec.max_turns,
                    segment_id=segment, phase_key=self.spec.start_phase(segment),
                ),
            )
            self._sessions[session.session_id] = session
            self._persist_session_event({"event": "start", "session": session.session_id,
                                         "segment": segment})
            return session

    def chat_session(self, session_id: str) -> ChatSession:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise ServiceError(404, "unknown_session", f"no session {session_id}")
            return session

    def chat_message(self, session_id: str, user_text: str) -> dict:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise ServiceError(404, "unknown_session", f"no session {session_id}")
            if session.done:
                raise ServiceError(409, "session_done", "session already finished")
            state = session.state
            interim = DialogueState(
                history=state.history + ((USER, user_text),),
                turn=state.turn,
                max_turns=state.max_turns,
                segment_id=state.segment_id,
                phase_key=state.phase_key,
            )
            action = self._policy_action(interim)
            entry = self.spec.entry(state.phase_key, self.catalog[action].id)
            next_turn = state.turn + 1
            done = entry.is_terminal or next_turn >= state.max_turns
            session.state = DialogueState(
                history=state.history + ((USER, user_text), (AGENT, self.catalog[action].text)),
                turn=next_turn,
                max_turns=state.max_turns,
                segment_id=state.segment_id,
                phase_key=entry.next_phase,
            )
            session.done = done
            reply = self.catalog[action].text
            session.transcript.append({"user": user_text, "agent": reply})
            self._message_count += 1
            self._persist_session_event(
                {"event": "message", "session": session_id, "user": user_text,
                 "agent_action": self.catalog[action].id, "turn": next_turn, "done": done}
            )
            return {
                "reply": reply,
                "action_id": self.catalog[action].id,
                "turn": next_turn,
                "remaining_turns": state.max_turns - next_turn,
                "done": done,
            }

    def _persist_session_event(self, event: dict) -> None:
        if not self.session_store:
            return
        os.makedirs(os.path.dirname(self.session_store) or ".", exist_ok=True)
        with open(self.session_store, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def metrics(self) -> dict:
        with self._lock:
            return {
                "labels": self._label_count,
                "open_tasks": sum(1 for t in self._tasks.values() if t.status == "open"),
                "tasks": len(self._tasks),
                "sessions": len(self._sessions),
                "messages": self._message_count,
                "fallback_substitutions": self._fallback_substitutions,
            }


# -- WSGI layer ---------------------------------------------------------------

_ROUTES = [
    ("GET", re.compile(r"^/api/health$"), "health"),
    ("GET", re.compile(r"^/api/metrics$"), "metrics"),
    ("GET", re.compile(r"^/api/tasks/next$"), "next_task"),
    ("POST", re.compile(r"^/api/tasks/(?P<task_id>[^/]+)/label$"), "label"),
    ("POST", re.compile(r"^/api/chat$"), "chat_start"),
    ("GET", re.compile(r"^/api/chat/(?P<session_id>[^/]+)$"), "chat_get"),
    ("POST", re.compile(r"^/api/chat/(?P<session_id>[^/]+)/message$"), "chat_message"),
]


class WsgiApp:
    """Thin JSON router over a FeedbackService, optionally serving static
    assets (the annotator UI) for any non-API path."""

    def __init__(self, service: FeedbackService, static_dir: str | None = None):
        self.service = service
        self.static_dir = static_dir

    def __call__(self, environ, start_response):
        method = environ["REQUEST_METHOD"]
        path = environ.get("PATH_INFO", "/")
        try:
            for route_method, pattern, name in _ROUTES:
                match = pattern.match(path)
                if match:
                    if method != route_method:
                        raise ServiceError(405, "method_not_allowed", f"{method} {path}")
                    handler = getattr(self, f"handle_{name}")
                    return handler(environ, start_response, **match.groupdict())
            if method == "GET" and self.static_dir:
                return self._static(environ, start_response, path)
            raise ServiceError(404, "not_found", f"no route for {path}")
        except ServiceError as exc:
            return _json_response(
                start_response, exc.status, {"error": str(exc), "code": exc.code}
            )

    # -- handlers -------------------------------------------------------------

    def handle_health(self, environ, start_response):
        return _json_response(start_response, 200, {"status": "ok"})

    def handle_metrics(self, environ, start_response):
        return _json_response(start_response, 200, self.service.metrics())

    def handle_next_task(self, environ, start_response):
        params = _query(environ)
        annotator = params.get("annotator")
        if not annotator:
            raise ServiceError(400, "missing_annotator", "annotator query parameter required")
        task = self.service.next_task(annotator)
        if task is None:
            start_response("204 No Content", [("Content-Length", "0")])
            return [b""]
        return _json_response(start_response, 200, task.view(self.service.catalog))

    def handle_label(self, environ, start_response, task_id):
        body = _json_body(environ)
        annotator = body.get("annotator")
        if not annotator:
            raise ServiceError(400, "missing_annotator", "annotator field required")
        ack = self.service.submit_label(task_id, annotator, body.get("choice"))
        return _json_response(start_response, 200, ack)

    def handle_chat_start(self, environ, start_response):
        body = _json_body(environ)
        segment = body.get("segment")
        if not segment:
            raise ServiceError(400, "missing_segment", "segment field required")
        session = self.service.chat_start(segment)
        return _json_response(start_response, 200, session.view())

    def handle_chat_get(self, environ, start_response, session_id):
        session = self.service.chat_session(session_id)
        return _json_response(start_response, 200, session.view())

    def handle_chat_message(self, environ, start_response, session_id):
        body = _json_body(environ)
        if "text" not in body:
            raise ServiceError(400, "missing_text", "text field required")
        result = self.service.chat_message(session_id, str(body["text"]))
        return _json_response(start_response, 200, result)

    def _static(self, environ, start_response, path):
        name = "index.html" if path in ("/", "") else path.lstrip("/")
        root = os.path.abspath(self.static_dir)
        full = os.path.abspath(os.path.join(root, name))
        if full != root and not full.startswith(root + os.sep):
            raise ServiceError(404, "not_found", "bad path")
        if not os.path.isfile(full):
            raise ServiceError(404, "not_found", f"no file {name}")
        content_type = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript; charset=utf-8",
            ".css": "text/css; charset=utf-8",
        }.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            data = fh.read()
        start_response(
            "200 OK", [("Content-Type", content_type), ("Content-Length", str(len(data)))]
        )
        return [data]


def _query(environ) -> dict:
    from urllib.parse import parse_qs

    return {k: v[0] for k, v in parse_qs(environ.get("QUERY_STRING", "")).items()}


def _json_body(environ) -> dict:
    try:
        length = int(environ.get("CONTENT_LENGTH") or 0)
    except ValueError:
        length = 0
    raw = environ["wsgi.input"].read(length) if length else b"{}"
    try:
        body = json.loads(raw.decode("utf-8") or "{}")
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ServiceError(400, "bad_json", f"request body is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise ServiceError(400, "bad_json", "request body must be a JSON object")
    return body


def _json_response(start_response, status: int, payload: dict):
    data = json.dumps(payload, sort_keys=True).encode("utf-8")
    reasons = {200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
               409: "Conflict", 500: "Internal Server Error"}
    start_response(
        f"{status} {reasons.get(status, 'Unknown')}",
        [("Content-Type", "application/json; charset=utf-8"), ("Content-Length", str(len(data)))],
    )
    return [data]


def build_service_from_config(config) -> WsgiApp:
    from .orchestrate import RunConfig  # avoid import cycle at module load

    assert isinstance(config, RunConfig)
    serve = config.serve_section
    artifact_path = serve.get("artifact")
    if not artifact_path:
        raise ConfigError("[serve] artifact path is required")
    artifact = PolicyArtifact.load(artifact_path)
    artifact.check_fingerprint(config.encoder)
    out = config.output_dir
    service = FeedbackService(
        artifact=artifact,
        spec=config.spec,
        catalog=config.catalog,
        rules=config.rules,
        label_store=serve.get("label_store", os.path.join(out, "labels.jsonl")),
        task_journal=serve.get("task_journal", os.path.join(out, "tasks.jsonl")),
        session_store=serve.get("session_store", os.path.join(out, "sessions.jsonl")),
        lease_seconds=float(serve.get("lease_seconds", DEFAULT_LEASE_SECONDS)),
        generate_tasks=bool(serve.get("generate_tasks", True)),
        seed=config.seed,
        audit=AuditLog(os.path.join(out, "audit.jsonl")),
    )
    return WsgiApp(service, static_dir=serve.get("static_dir"))


def run_server(app: WsgiApp, host: str = "127.0.0.1", port: int = 8077) -> None:
    from socketserver import ThreadingMixIn
    from wsgiref.simple_server import WSGIServer, make_server

    class ThreadingWSGIServer(ThreadingMixIn, WSGIServer):
        daemon_threads = True

    with make_server(host, port, app, server_class=ThreadingWSGIServer) as httpd:
        print(f"talktrack feedback service on http://{host}:{port}")
        httpd.serve_forever()
