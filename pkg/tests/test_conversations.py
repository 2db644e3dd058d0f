"""Tool-calling conversation validation: extraction, validators, escalation."""
from __future__ import annotations

import json
from datetime import datetime, timezone

import httpx
import pytest

from protoflow.conversations import (
    Adequate,
    ConversationManager,
    EmrRecord,
    EmrStore,
    Escalate,
    ExtractionRule,
    HttpLlmBackend,
    Restate,
    ScriptedBackend,
    SessionClosedError,
    ToolFunction,
    resolve_time_phrase,
    validate_did_take_medication,
)

NOW = datetime(2026, 3, 2, 14, 0, tzinfo=timezone.utc)  # 10:00 in New York

BETA_BLOCKER_QUESTION = "When did you last take your beta blocker?"

MED_TOOL = ToolFunction(
    name="did_take_medication",
    parameters=(("when", "text"),),
    validator="did_take_medication",
    question=BETA_BLOCKER_QUESTION,
    restatements=(
        "Could you tell me when you last took your beta blocker?",
        "Please reply with a time, like 'this morning' or '8am'.",
        "When did you most recently take your beta blocker?",
    ),
    rules=(
        ExtractionRule(
            "regex",
            r"\b(this morning|this evening|tonight|yesterday|last week|today|"
            r"\d{1,2}(?::\d{2})?\s*[ap]\.?m\.?)\b",
            (("when", "$1"),),
        ),
    ),
)

NUMBER_TOOL = ToolFunction(
    name="report_weight",
    parameters=(("pounds", "number"),),
    validator="nonempty_text",
    question="What is your weight this morning?",
    rules=(ExtractionRule("regex", r"\b(\d{2,3})\s*(?:lbs|pounds)\b", (("pounds", "$1"),)),),
)


def make_manager(notifications=None, tool_results=None, sends=None):
    notifications = notifications if notifications is not None else []
    tool_results = tool_results if tool_results is not None else []
    sends = sends if sends is not None else []
    emr = EmrStore()
    emr.put(EmrRecord("p1", medications=[("Acebutolol", "morning")]))
    manager = ConversationManager(
        emr=emr,
        send_text=lambda pid, text: sends.append((pid, text)),
        notify_staff=lambda pid, reason, cat: notifications.append((pid, reason, cat)),
        emit_tool_result=lambda pid, sid, tool, outcome, values:
            tool_results.append((sid, tool, outcome, values)),
    )
    manager.register_tool(MED_TOOL)
    manager.register_tool(NUMBER_TOOL)
    return manager


class TestAsk:
    def test_question_rendered_and_sent(self):
        sends = []
        manager = make_manager(sends=sends)
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, BETA_BLOCKER_QUESTION)
        assert sends == [("p1", BETA_BLOCKER_QUESTION)]
        assert session.pending_question == BETA_BLOCKER_QUESTION

    def test_missing_template_arg_raises(self):
        manager = make_manager()
        session = manager.open_session("p1", ["did_take_medication"])
        with pytest.raises(KeyError):
            manager.ask(session, "Hello {name}, how are you?")

    def test_second_ask_replaces_question_without_touching_attempts(self):
        manager = make_manager(sends=[])
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, "First question?")
        manager.ask(session, "Second question?")
        assert session.pending_question == "Second question?"
        assert session.attempt_count == 0

    def test_ask_on_closed_session_raises(self):
        manager = make_manager()
        session = manager.open_session("p1", ["did_take_medication"])
        session.status = "satisfied"
        with pytest.raises(SessionClosedError):
            manager.ask(session, "Anything?")


class TestHandleAnswer:
    def test_adequate_morning_answer(self):
        tool_results = []
        manager = make_manager(tool_results=tool_results)
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, BETA_BLOCKER_QUESTION)
        outcome = manager.handle_answer(
            session, "I took it this morning with my coffee", NOW, "America/New_York"
        )
        assert isinstance(outcome, Adequate)
        assert outcome.values == {"when": "this morning"}
        assert session.status == "satisfied"
        assert tool_results == [
            (session.session_id, "did_take_medication", "adequate",
             {"when": "this morning"})
        ]

    def test_three_inadequate_answers_escalate_once(self):
        notifications = []
        sends = []
        manager = make_manager(notifications=notifications, sends=sends)
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, BETA_BLOCKER_QUESTION)
        outcomes = [
            manager.handle_answer(session, "what?", NOW, "America/New_York")
            for _ in range(3)
        ]
        assert isinstance(outcomes[0], Restate)
        assert isinstance(outcomes[1], Restate)
        assert isinstance(outcomes[2], Escalate)
        assert session.status == "escalated"
        assert session.attempt_count == 3
        assert len(notifications) == 1
        # further answers are ignored, never a second notification
        assert manager.handle_answer(session, "what?", NOW, "America/New_York") is None
        assert len(notifications) == 1

    def test_empty_answer_restates_attempt_one(self):
        manager = make_manager(sends=[])
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, BETA_BLOCKER_QUESTION)
        outcome = manager.handle_answer(session, "", NOW, "America/New_York")
        assert isinstance(outcome, Restate)
        assert session.attempt_count == 1

    def test_restatements_cycle_through_variants(self):
        manager = make_manager()
        session = manager.open_session("p1", ["did_take_medication"])
        manager.ask(session, BETA_BLOCKER_QUESTION)
        first = manager.handle_answer(session, "huh", NOW, "America/New_York")
        second = manager.handle_answer(session, "huh", NOW, "America/New_York")
        assert first.question == MED_TOOL.restatements[0]
        assert second.question == MED_TOOL.restatements[1]

    def test_deterministic_transcript(self):
        answers = ["hmm", "I took it this morning"]

        def run():
            manager = make_manager(sends=[])
            session = manager.open_session("p1", ["did_take_medication"])
            manager.ask(session, BETA_BLOCKER_QUESTION)
            trace = []
            for answer in answers:
                outcome = manager.handle_answer(session, answer, NOW, "America/New_York")
                trace.append((type(outcome).__name__, getattr(outcome, "values", None),
                              getattr(outcome, "question", None)))
            return trace, session.history

        assert run() == run()


class TestExtraction:
    def test_morning_phrase_binds_when(self):
        backend = ScriptedBackend()
        result = backend.extract("I took it this morning", [MED_TOOL])
        assert not result.unmatched
        assert result.matches[0].args == {"when": "this morning"}

    def test_color_answer_unmatched_for_numeric_tool(self):
        backend = ScriptedBackend()
        result = backend.extract("blue", [NUMBER_TOOL])
        assert result.unmatched

    def test_answer_matching_two_tools_returns_two_matches(self):
        backend = ScriptedBackend()
        result = backend.extract(
            "this morning I weighed 180 lbs", [MED_TOOL, NUMBER_TOOL]
        )
        assert [m.tool for m in result.matches] == [
            "did_take_medication", "report_weight"
        ]
        assert result.matches[1].args == {"pounds": "180"}

    def test_extract_requires_bound_tools(self):
        manager = make_manager()
        with pytest.raises(ValueError):
            manager.extract_arguments("anything", [])

    def test_rule_missing_required_param_is_skipped(self):
        tool = ToolFunction(
            name="two_args",
            parameters=(("a", "text"), ("b", "text")),
            validator="nonempty_text",
            rules=(ExtractionRule("phrase", "hello", (("a", "x"),)),),
        )
        backend = ScriptedBackend()
        assert backend.extract("hello", [tool]).unmatched


class TestValidator:
    def setup_method(self):
        self.emr = EmrRecord("p1", medications=[("Acebutolol", "morning")])

    def test_this_morning_true_at_ten_am(self):
        assert validate_did_take_medication(
            {"when": "this morning"}, self.emr, NOW, "America/New_York"
        )

    def test_last_week_false(self):
        assert not validate_did_take_medication(
            {"when": "last week"}, self.emr, NOW, "America/New_York"
        )

    def test_yesterday_false(self):
        assert not validate_did_take_medication(
            {"when": "yesterday morning"}, self.emr, NOW, "America/New_York"
        )

    def test_afternoon_clock_time_false_for_morning_schedule(self):
        assert not validate_did_take_medication(
            {"when": "3pm"}, self.emr, NOW, "America/New_York"
        )

    def test_morning_clock_time_true(self):
        assert validate_did_take_medication(
            {"when": "8am"}, self.emr, NOW, "America/New_York"
        )

    def test_no_emr_record_false(self):
        assert not validate_did_take_medication({"when": "this morning"}, None, NOW)

    def test_missing_medication_false(self):
        empty = EmrRecord("p1", medications=[])
        assert not validate_did_take_medication({"when": "this morning"}, empty, NOW)

    def test_named_medication_must_exist(self):
        assert not validate_did_take_medication(
            {"when": "this morning", "medication": "Metoprolol"}, self.emr, NOW,
            "America/New_York",
        )

    def test_evening_schedule(self):
        emr = EmrRecord("p1", medications=[("Carvedilol", "evening")])
        assert validate_did_take_medication(
            {"when": "tonight"}, emr, NOW, "America/New_York"
        )
        assert not validate_did_take_medication(
            {"when": "this morning"}, emr, NOW, "America/New_York"
        )


def test_resolve_time_phrase_lexicon():
    local_now = datetime(2026, 3, 2, 10, 0)
    assert resolve_time_phrase("this morning", local_now)[1].hour < 12
    assert resolve_time_phrase("tonight", local_now)[1].hour >= 17
    assert resolve_time_phrase("yesterday", local_now)[0] == -1
    assert resolve_time_phrase("last week", local_now)[0] == -7
    assert resolve_time_phrase("7:45pm", local_now)[1].hour == 19
    assert resolve_time_phrase("gibberish", local_now) is None


class TestHttpBackend:
    def test_request_shape(self, monkeypatch):
        monkeypatch.setenv("PF_LLM_ENDPOINT", "https://llm.example/v1/chat")
        monkeypatch.setenv("PF_LLM_MODEL", "local-model")
        backend = HttpLlmBackend()
        request = backend.build_request("I took it this morning", [MED_TOOL])
        assert request["model"] == "local-model"
        assert request["messages"][0]["content"] == "I took it this morning"
        fn = request["tools"][0]["function"]
        assert fn["name"] == "did_take_medication"
        assert fn["parameters"]["required"] == ["when"]

    def test_extract_parses_tool_calls(self, monkeypatch):
        monkeypatch.setenv("PF_LLM_ENDPOINT", "https://llm.example/v1/chat")

        def respond(request):
            payload = {
                "choices": [{"message": {"tool_calls": [{
                    "function": {
                        "name": "did_take_medication",
                        "arguments": json.dumps({"when": "this morning"}),
                    }
                }]}}]
            }
            return httpx.Response(200, json=payload)

        client = httpx.Client(transport=httpx.MockTransport(respond))
        backend = HttpLlmBackend(client=client)
        result = backend.extract("I took it this morning", [MED_TOOL])
        assert result.matches[0].args == {"when": "this morning"}

    def test_disabled_without_endpoint(self, monkeypatch):
        monkeypatch.delenv("PF_LLM_ENDPOINT", raising=False)
        backend = HttpLlmBackend()
        assert not backend.configured
        with pytest.raises(RuntimeError):
            backend.extract("x", [MED_TOOL])


def test_backend_failure_restates_and_reports():
    failures = []

    class ExplodingBackend:
        def extract(self, text, tools):
            raise ConnectionError("backend down")

        def generate_restatement(self, tool, question, attempt):
            return "Sorry, could you try again?"

    emr = EmrStore()
    manager = ConversationManager(
        backend=ExplodingBackend(), emr=emr,
        on_backend_failure=lambda sid, err: failures.append((sid, err)),
    )
    manager.register_tool(MED_TOOL)
    session = manager.open_session("p1", ["did_take_medication"])
    manager.ask(session, BETA_BLOCKER_QUESTION)
    outcome = manager.handle_answer(session, "this morning", NOW)
    assert isinstance(outcome, Restate)
    assert session.attempt_count == 1
    assert failures and failures[0][0] == session.session_id
