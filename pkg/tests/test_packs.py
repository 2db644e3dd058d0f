"""Shipped protocol packs exercised end-to-end through the engine."""
from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from protoflow import audit as audit_kinds
from protoflow.clock import VirtualClock
from protoflow.conversations import EmrRecord
from protoflow.dsl import validate_graph
from protoflow.engine import Engine
from protoflow.gateway import NumberPool
from protoflow.packs import (
    PackLoadError,
    load_pack,
    load_shipped_pack,
    parse_tools_file,
    shipped_pack_names,
)

START = datetime(2026, 3, 2, 6, 0, tzinfo=timezone.utc)


def make_engine(pack_name, study_id="s1", tz="UTC"):
    clock = VirtualClock(START)
    engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
    engine.create_study(study_id, pack_name, load_shipped_pack(pack_name),
                        timezone_default=tz, staff_addresses=("+15559990000",))
    return engine, clock


def outbound_bodies(engine):
    return [m.body for m in engine.gateway.store.outbound]


class TestShippedPacksCompile:
    def test_all_shipped_packs_listed(self):
        assert shipped_pack_names() == ["optimalct", "plantdiet", "tre"]

    @pytest.mark.parametrize("name", ["tre", "optimalct", "plantdiet"])
    def test_pack_compiles_clean(self, name):
        pack = load_shipped_pack(name)
        assert validate_graph(pack.graph) == []
        assert pack.compiled.version_hash

    def test_broken_pack_raises_with_diagnostics(self, tmp_path):
        pack_dir = tmp_path / "broken"
        pack_dir.mkdir()
        (pack_dir / "protocol.pfp").write_text(
            'protocol "broken" { state A initial; A -> Missing on message "go"; }'
        )
        with pytest.raises(PackLoadError, match="Missing"):
            load_pack(pack_dir)


class TestTrePack:
    def test_full_day_cycle(self):
        engine, clock = make_engine("tre")
        engine.register_participant("s1", "p1", "+15551000001")
        clock.set_to(START + timedelta(hours=2))  # 08:00
        engine.submit_text("p1", "startcal 8:00am")
        clock.set_to(START + timedelta(hours=12))  # 18:00
        engine.submit_text("p1", "endcal 6:00pm")
        fasts = engine.studies["s1"].metrics.fasts
        assert len(fasts) == 1 and fasts[0].success
        assert engine.machines["p1"].current_state == "WaitingStart"

    def test_daily_reminder_only_without_startcal(self):
        engine, clock = make_engine("tre")
        engine.register_participant("s1", "quiet", "+15551000001")
        engine.register_participant("s1", "active", "+15551000002")
        clock.set_to(START + timedelta(hours=2))
        engine.submit_text("active", "startcal 8:00am")
        clock.set_to(START + timedelta(hours=8))
        engine.submit_text("active", "endcal")  # back to WaitingStart before 20:00
        clock.set_to(datetime(2026, 3, 2, 20, 0, tzinfo=timezone.utc))
        engine.tick()
        reminders = [
            m for m in engine.gateway.store.outbound
            if "haven't received your STARTCAL" in m.body
        ]
        assert len(reminders) == 1
        assert reminders[0].to_address == "+15551000001"

    def test_limit_reminder_at_eleven_hours(self):
        engine, clock = make_engine("tre")
        engine.register_participant("s1", "p1", "+15551000001")
        clock.set_to(START + timedelta(hours=1))
        engine.submit_text("p1", "startcal")
        clock.advance(timedelta(hours=11, seconds=2))
        engine.tick()
        assert any("11 hour limit" in b for b in outbound_bodies(engine))
        assert engine.machines["p1"].current_state == "Eating"

    def test_stalled_endcal_records_failed_fast(self):
        engine, clock = make_engine("tre")
        engine.register_participant("s1", "p1", "+15551000001")
        clock.set_to(START + timedelta(hours=1))
        engine.submit_text("p1", "startcal")
        clock.advance(timedelta(hours=25))
        engine.tick()
        assert engine.machines["p1"].current_state == "Stalled"
        engine.submit_text("p1", "endcal")
        assert engine.machines["p1"].current_state == "WaitingStart"
        fasts = engine.studies["s1"].metrics.fasts
        assert len(fasts) == 1 and not fasts[0].success

    def test_inverted_window_not_recorded(self):
        engine, clock = make_engine("tre")
        engine.register_participant("s1", "p1", "+15551000001")
        clock.set_to(START + timedelta(hours=4))  # 10:00
        engine.submit_text("p1", "startcal 10:00am")
        engine.submit_text("p1", "endcal 9:00am")  # earlier the same day
        assert engine.studies["s1"].metrics.fasts == []
        assert any("could not be recorded" in b for b in outbound_bodies(engine))


class TestOptimalCtPack:
    def make(self):
        engine, clock = make_engine("optimalct", tz="America/New_York")
        engine.emr.put(EmrRecord("pat", medications=[("Acebutolol", "morning")]))
        engine.register_participant("s1", "pat", "+15551000001",
                                    timezone="America/New_York")
        engine.submit_text("pat", "start")
        return engine, clock

    def test_morning_checkin_adequate_answer(self):
        engine, clock = self.make()
        assert engine.machines["pat"].current_state == "PreopMonitoring"
        clock.set_to(datetime(2026, 3, 2, 14, 0, tzinfo=timezone.utc))  # 09:00 NY
        engine.tick()
        assert "When did you last take your beta blocker?" in outbound_bodies(engine)
        engine.submit_text("pat", "I took it this morning with my coffee")
        machine = engine.machines["pat"]
        assert machine.current_state == "PreopMonitoring"
        assert machine.context["med_checkin.when"] == "this morning"
        assert engine.studies["s1"].metrics.counters.get("checkin_recorded") == 1

    def test_three_bad_answers_escalate_to_needs_intervention(self):
        engine, clock = self.make()
        clock.set_to(datetime(2026, 3, 2, 14, 0, tzinfo=timezone.utc))
        engine.tick()
        for _ in range(3):
            engine.submit_text("pat", "what?")
        machine = engine.machines["pat"]
        assert machine.current_state == "NeedsIntervention"
        notifications = [
            r for r in engine.audit.records(kind=audit_kinds.NOTIFICATION)
            if r.detail.get("category") == "conversation_escalated"
        ]
        assert len(notifications) == 1

    def test_surgery_confirmation_reaches_documented(self):
        engine, clock = self.make()
        clock.set_to(datetime(2026, 3, 9, 11, 0, tzinfo=timezone.utc))
        engine.tick()
        # answer the 09:00 check-in fired on 3/2..3/8; close today's session first
        session = engine.conversations.open_session_for("pat")
        if session:
            engine.submit_text("pat", "I took it this morning")
        engine.submit_text("pat", "surgery")
        assert engine.machines["pat"].current_state == "MorningOfSurgery"
        engine.submit_text("pat", "yes I took it")
        machine = engine.machines["pat"]
        assert machine.current_state == "Documented"
        assert machine.status == "completed"
        assert engine.studies["s1"].metrics.counters.get("registry_row_recorded") == 1
        assert any("surgical registry" in b for b in outbound_bodies(engine))


class TestPlantDietPack:
    def make(self):
        engine, clock = make_engine("plantdiet")
        engine.register_participant("s1", "p1", "+15551000001")
        clock.set_to(datetime(2026, 3, 2, 8, 0, tzinfo=timezone.utc))
        engine.tick()  # breakfast window opens
        return engine, clock

    def test_photo_flow_with_rating(self):
        engine, clock = self.make()
        assert engine.machines["p1"].current_state == "AwaitingPhoto"
        assert any("photo of your plate" in b for b in outbound_bodies(engine))
        engine.submit_text("p1", "here you go", attachments=1)
        assert engine.machines["p1"].current_state == "RateMeal"
        engine.submit_text("p1", "4")
        machine = engine.machines["p1"]
        assert machine.current_state == "AwaitingMeal"
        assert machine.context["last_meal_rating"] == 4

    def test_missed_photo_deadline_exactly_one_fallback_prompt(self):
        engine, clock = self.make()
        clock.advance(timedelta(hours=2, minutes=1))
        engine.tick()
        assert engine.machines["p1"].current_state == "DescribeByText"
        fallbacks = [b for b in outbound_bodies(engine)
                     if "describe the meal" in b]
        assert len(fallbacks) == 1
        # lingering in DescribeByText never re-prompts
        clock.advance(timedelta(hours=5))
        engine.tick()
        fallbacks = [b for b in outbound_bodies(engine)
                     if "describe the meal" in b]
        assert len(fallbacks) == 1

    def test_text_description_fallback_records_meal(self):
        engine, clock = self.make()
        clock.advance(timedelta(hours=3))
        engine.tick()
        engine.submit_text("p1", "rice and beans with salad")
        assert engine.machines["p1"].current_state == "RateMeal"
        assert engine.studies["s1"].metrics.counters["description_received"] == 1

    def test_out_of_range_rating_rejected_by_guard(self):
        engine, clock = self.make()
        engine.submit_text("p1", "photo", attachments=1)
        outcome = engine.submit_text("p1", "9")
        assert outcome.result == "no_match"
        assert engine.machines["p1"].current_state == "RateMeal"
        assert engine.submit_text("p1", "5").result == "applied"


class TestToolsFileParsing:
    def test_optimalct_tools_load(self):
        pack = load_shipped_pack("optimalct")
        names = [t.name for t in pack.tools]
        assert names == ["med_checkin", "surgery_confirm"]
        med = pack.tools[0]
        assert med.question == "When did you last take your beta blocker?"
        assert len(med.restatements) == 3
        assert med.validator == "did_take_medication"

    def test_malformed_tools_file(self):
        with pytest.raises(PackLoadError, match="validator"):
            parse_tools_file("tool broken\nparam x text\nend\n")

    def test_duplicate_param_rejected(self):
        text = "tool t\nparam a text\nparam a text\nvalidator nonempty_text\nend\n"
        with pytest.raises(PackLoadError, match="duplicate parameter"):
            parse_tools_file(text)

    def test_binding_forms(self):
        text = (
            "tool t\n"
            "param when text\n"
            "validator nonempty_text\n"
            'match phrase "this morning" -> when="this morning"\n'
            'match regex "(\\d+am)" -> when=$1\n'
            "end\n"
        )
        tools = parse_tools_file(text)
        assert tools[0].rules[0].bindings == (("when", "this morning"),)
        assert tools[0].rules[1].bindings == (("when", "$1"),)
