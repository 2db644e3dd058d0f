"""Question/answer validation via tool calling.

A session asks one question at a time, extracts arguments from the free-text
answer (scripted rule table by default; a chat-completions adapter is
available), validates them against study data such as the EMR stub, restates
on failure, and escalates to staff after three inadequate answers. No value
reaches a participant machine unless a validator accepted it.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, time
from zoneinfo import ZoneInfo

from .clock import as_utc

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 3

MORNING = (time(6, 0), time(11, 59))
EVENING = (time(17, 0), time(21, 59))


# ---------------------------------------------------------------------------
# Tool declarations


@dataclass(frozen=True)
class ExtractionRule:
    kind: str  # "phrase" | "regex"
    pattern: str
    bindings: tuple[tuple[str, str], ...]  # value, "$<n>" group ref, or "$text"


@dataclass(frozen=True)
class ToolFunction:
    name: str
    parameters: tuple[tuple[str, str], ...]  # (name, text|number|instant|boolean)
    validator: str
    question: str = ""
    restatements: tuple[str, ...] = ()
    rules: tuple[ExtractionRule, ...] = ()

    def param_names(self) -> set[str]:
        return {name for name, _ in self.parameters}


@dataclass(frozen=True)
class ToolMatch:
    tool: str
    args: dict
    confident: bool


@dataclass(frozen=True)
class ExtractionResult:
    matches: tuple[ToolMatch, ...]

    @property
    def unmatched(self) -> bool:
        return not self.matches


# ---------------------------------------------------------------------------
# Backends


class ScriptedBackend:
    """Deterministic extraction: ordered literal/regex rules per tool. The
    first matching rule of each tool yields that tool's match."""

    def extract(self, text: str, tools: list[ToolFunction]) -> ExtractionResult:
        matches = []
        for tool in tools:
            for rule in tool.rules:
                args = self._apply(rule, text)
                if args is None:
                    continue
                if not tool.param_names() <= set(args):
                    continue  # rule does not bind every required parameter
                matches.append(ToolMatch(tool.name, args, rule.kind == "phrase"))
                break
        return ExtractionResult(tuple(matches))

    @staticmethod
    def _apply(rule: ExtractionRule, text: str) -> dict | None:
        if rule.kind == "phrase":
            if rule.pattern.lower() not in text.lower():
                return None
            groups: tuple[str, ...] = ()
        else:
            found = re.search(rule.pattern, text, re.IGNORECASE)
            if not found:
                return None
            groups = found.groups()
        args = {}
        for name, value in rule.bindings:
            if value == "$text":
                args[name] = text
            elif re.fullmatch(r"\$\d+", value):
                index = int(value[1:]) - 1
                if index >= len(groups) or groups[index] is None:
                    return None
                args[name] = groups[index]
            else:
                args[name] = value
        return args

    def generate_restatement(self, tool: ToolFunction, question: str, attempt: int) -> str:
        if tool.restatements:
            return tool.restatements[(attempt - 1) % len(tool.restatements)]
        return f"Sorry, I didn't understand. {question}"


class HttpLlmBackend:
    """Adapter for a chat-completions API with function calling. Configured
    from PF_LLM_ENDPOINT / PF_LLM_MODEL / PF_LLM_KEY; disabled by default."""

    def __init__(self, client=None):
        self.endpoint = os.environ.get("PF_LLM_ENDPOINT")
        self.model = os.environ.get("PF_LLM_MODEL", "")
        self.key = os.environ.get("PF_LLM_KEY", "")
        self._client = client

    @property
    def configured(self) -> bool:
        return bool(self.endpoint)

    def build_request(self, text: str, tools: list[ToolFunction]) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": text}],
            "tools": [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "parameters": {
                            "type": "object",
                            "properties": {
                                name: {"type": "string", "description": sem}
                                for name, sem in t.parameters
                            },
                            "required": [name for name, _ in t.parameters],
                        },
                    },
                }
                for t in tools
            ],
        }

    def extract(self, text: str, tools: list[ToolFunction]) -> ExtractionResult:
        if not self.configured:
            raise RuntimeError("LLM backend is not configured")
        import httpx

        client = self._client or httpx
        response = client.post(
            self.endpoint,
            json=self.build_request(text, tools),
            headers={"Authorization": f"Bearer {self.key}"},
        )
        response.raise_for_status()
        payload = response.json()
        matches = []
        calls = payload.get("choices", [{}])[0].get("message", {}).get("tool_calls", [])
        for call in calls:
            fn = call.get("function", {})
            try:
                args = json.loads(fn.get("arguments", "{}"))
            except json.JSONDecodeError:
                continue
            matches.append(ToolMatch(fn.get("name", ""), args, False))
        return ExtractionResult(tuple(matches))

    def generate_restatement(self, tool: ToolFunction, question: str, attempt: int) -> str:
        if tool.restatements:
            return tool.restatements[(attempt - 1) % len(tool.restatements)]
        return f"Sorry, I didn't understand. {question}"


# ---------------------------------------------------------------------------
# EMR stub


@dataclass
class EmrRecord:
    participant_id: str
    medications: list[tuple[str, str]] = field(default_factory=list)  # (name, schedule)
    allergies: list[str] = field(default_factory=list)

    def medication_schedule(self, name: str | None) -> tuple[str, str] | None:
        if name:
            for med, schedule in self.medications:
                if med.lower() == name.lower():
                    return med, schedule
            return None
        if len(self.medications) == 1:
            return self.medications[0]
        return self.medications[0] if self.medications else None


class EmrStore:
    def __init__(self):
        self._records: dict[str, EmrRecord] = {}

    def put(self, record: EmrRecord) -> None:
        self._records[record.participant_id] = record

    def get(self, participant_id: str) -> EmrRecord | None:
        return self._records.get(participant_id)


# ---------------------------------------------------------------------------
# Time-phrase lexicon and validators

_CLOCK_RE = re.compile(r"\b(\d{1,2})(?::(\d{2}))?\s*([ap])\.?m\.?\b", re.IGNORECASE)

_PHRASES: list[tuple[str, tuple[int, str | None]]] = [
    ("this morning", (0, "morning")),
    ("this evening", (0, "evening")),
    ("tonight", (0, "evening")),
    ("this afternoon", (0, "afternoon")),
    ("yesterday morning", (-1, "morning")),
    ("yesterday evening", (-1, "evening")),
    ("yesterday", (-1, None)),
    ("last night", (-1, "evening")),
    ("last week", (-7, None)),
    ("just now", (0, "now")),
    ("today", (0, None)),
]


def resolve_time_phrase(phrase: str, now_local: datetime) -> tuple[int, time] | None:
    """Map a colloquial time phrase to (day offset, representative local time).
    Returns None when the phrase is outside the lexicon."""
    lowered = phrase.lower()
    clock = _CLOCK_RE.search(lowered)
    if clock:
        hour = int(clock.group(1))
        minute = int(clock.group(2) or 0)
        if 1 <= hour <= 12 and minute <= 59:
            hour %= 12
            if clock.group(3).lower() == "p":
                hour += 12
            return (0, time(hour, minute))
    for text, (offset, window) in _PHRASES:
        if text in lowered:
            if window == "morning":
                return (offset, time(8, 0))
            if window == "evening":
                return (offset, time(19, 0))
            if window == "afternoon":
                return (offset, time(14, 0))
            if window == "now":
                return (offset, time(now_local.hour, now_local.minute))
            return (offset, time(12, 0))
    return None


def validate_did_take_medication(
    args: dict, emr: EmrRecord | None, now: datetime, tz_name: str = "UTC"
) -> bool:
    """True iff the stated time phrase is consistent with the medication's
    scheduled window: a morning schedule requires a same-day time before
    12:00 participant-local."""
    if emr is None:
        logger.info("validator did_take_medication: no EMR record")
        return False
    med = emr.medication_schedule(args.get("medication"))
    if med is None:
        logger.info("validator did_take_medication: medication not in EMR")
        return False
    _, schedule = med
    now_local = as_utc(now).astimezone(ZoneInfo(tz_name))
    resolved = resolve_time_phrase(str(args.get("when", "")), now_local)
    if resolved is None:
        return False
    day_offset, stated = resolved
    if day_offset != 0:
        return False
    if schedule == "morning":
        return stated < time(12, 0)
    if schedule == "evening":
        return stated >= EVENING[0]
    return True  # twice-daily: any same-day time


def validate_nonempty_text(args: dict, emr, now, tz_name: str = "UTC") -> bool:
    return any(str(v).strip() for v in args.values())


def validate_rating_1_to_5(args: dict, emr, now, tz_name: str = "UTC") -> bool:
    try:
        return 1 <= int(str(args.get("rating", "")).strip()) <= 5
    except ValueError:
        return False


VALIDATORS = {
    "did_take_medication": validate_did_take_medication,
    "nonempty_text": validate_nonempty_text,
    "rating_1_to_5": validate_rating_1_to_5,
}


# ---------------------------------------------------------------------------
# Sessions


@dataclass
class ConversationSession:
    session_id: str
    participant_id: str
    bound_tools: list[str]
    pending_question: str = ""
    attempt_count: int = 0
    history: list[tuple[str, str, str]] = field(default_factory=list)
    status: str = "open"  # open | satisfied | escalated

    def to_doc(self) -> dict:
        return {
            "session_id": self.session_id,
            "participant_id": self.participant_id,
            "bound_tools": list(self.bound_tools),
            "pending_question": self.pending_question,
            "attempt_count": self.attempt_count,
            "history": [list(h) for h in self.history],
            "status": self.status,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ConversationSession":
        return cls(
            session_id=doc["session_id"],
            participant_id=doc["participant_id"],
            bound_tools=list(doc["bound_tools"]),
            pending_question=doc["pending_question"],
            attempt_count=doc["attempt_count"],
            history=[tuple(h) for h in doc["history"]],
            status=doc["status"],
        )


@dataclass(frozen=True)
class Adequate:
    tool: str
    values: dict


@dataclass(frozen=True)
class Restate:
    question: str


@dataclass(frozen=True)
class Escalate:
    reason: str


AnswerOutcome = Adequate | Restate | Escalate


class SessionClosedError(Exception):
    pass


class ConversationManager:
    """Owns sessions and drives the ask/answer/validate loop. Side effects
    (sending, notifying, emitting tool results) go through injected hooks so
    the engine stays the single writer."""

    def __init__(
        self,
        backend=None,
        emr: EmrStore | None = None,
        send_text=None,
        notify_staff=None,
        emit_tool_result=None,
        validators: dict | None = None,
        clock=None,
        on_backend_failure=None,
    ):
        self.backend = backend or ScriptedBackend()
        self.emr = emr or EmrStore()
        self.send_text = send_text or (lambda participant_id, text: None)
        self.notify_staff = notify_staff or (lambda participant_id, reason, category: None)
        self.emit_tool_result = emit_tool_result or (
            lambda participant_id, session_id, tool, outcome, values: None
        )
        self.validators = validators or dict(VALIDATORS)
        self.clock = clock
        self.on_backend_failure = on_backend_failure or (lambda session_id, error: None)
        self.sessions: dict[str, ConversationSession] = {}
        self.tools: dict[str, ToolFunction] = {}
        self._counter = 0

    def register_tool(self, tool: ToolFunction) -> None:
        if tool.validator not in self.validators:
            raise ValueError(f"tool {tool.name!r} references unknown validator {tool.validator!r}")
        self.tools[tool.name] = tool

    def open_session(
        self, participant_id: str, tool_names: list[str], tz_name: str = "UTC"
    ) -> ConversationSession:
        for name in tool_names:
            if name not in self.tools:
                raise KeyError(f"unknown tool {name!r}")
        self._counter += 1
        session = ConversationSession(
            session_id=f"s-{self._counter}",
            participant_id=participant_id,
            bound_tools=list(tool_names),
        )
        self.sessions[session.session_id] = session
        return session

    def open_session_for(self, participant_id: str) -> ConversationSession | None:
        for session in self.sessions.values():
            if session.participant_id == participant_id and session.status == "open":
                return session
        return None

    def ask(self, session: ConversationSession, question_template: str, **args) -> str:
        """Render and send the question; a repeated ask replaces the pending
        question without touching the attempt counter."""
        if session.status != "open":
            raise SessionClosedError(f"session {session.session_id} is {session.status}")
        question = question_template.format(**args)  # KeyError on missing template arg
        session.pending_question = question
        self.send_text(session.participant_id, question)
        return question

    def extract_arguments(self, text: str, tools: list[ToolFunction]) -> ExtractionResult:
        if not tools:
            raise ValueError("at least one tool must be bound")
        return self.backend.extract(text, tools)

    def handle_answer(
        self, session: ConversationSession, answer: str, now: datetime, tz_name: str = "UTC"
    ) -> AnswerOutcome | None:
        """Validate one answer. Returns None (audited by caller) for closed
        sessions; otherwise Adequate, Restate, or Escalate."""
        if session.status != "open":
            return None
        tools = [self.tools[name] for name in session.bound_tools]
        try:
            extraction = self.extract_arguments(answer, tools)
        except Exception as exc:  # backend unavailable: restate, keep the session alive
            logger.exception("extraction backend failed for session %s", session.session_id)
            self.on_backend_failure(session.session_id, repr(exc))
            extraction = ExtractionResult(())
        emr_record = self.emr.get(session.participant_id)
        for match in extraction.matches:
            validator = self.validators[self.tools[match.tool].validator]
            if validator(match.args, emr_record, now, tz_name):
                session.status = "satisfied"
                session.history.append((session.pending_question, answer, "adequate"))
                self.emit_tool_result(
                    session.participant_id, session.session_id, match.tool,
                    "adequate", match.args,
                )
                return Adequate(match.tool, match.args)
        session.attempt_count += 1
        if session.attempt_count >= MAX_ATTEMPTS:
            session.status = "escalated"
            session.history.append((session.pending_question, answer, "escalated"))
            reason = (
                f"participant {session.participant_id} gave {MAX_ATTEMPTS} inadequate "
                f"answers to: {session.pending_question}"
            )
            self.notify_staff(session.participant_id, reason, "conversation_escalated")
            primary_tool = session.bound_tools[0] if session.bound_tools else ""
            self.emit_tool_result(
                session.participant_id, session.session_id, primary_tool, "escalated", {},
            )
            return Escalate(reason)
        session.history.append((session.pending_question, answer, "inadequate"))
        tool = tools[0]
        restatement = self.backend.generate_restatement(
            tool, session.pending_question, session.attempt_count
        )
        session.pending_question = restatement
        self.send_text(session.participant_id, restatement)
        return Restate(restatement)

    # -- snapshot support

    def snapshot_sessions(self) -> dict:
        return {
            "counter": self._counter,
            "sessions": [s.to_doc() for s in self.sessions.values()],
        }

    def restore_sessions(self, state: dict) -> None:
        self._counter = state["counter"]
        self.sessions = {
            doc["session_id"]: ConversationSession.from_doc(doc)
            for doc in state["sessions"]
        }
