"""FSM runtime: registration, dispatch, manual overrides, audit, replay."""
from __future__ import annotations

import copy
from datetime import datetime, timedelta, timezone
from random import Random

import pytest

from protoflow import audit as audit_kinds
from protoflow.clock import VirtualClock
from protoflow.engine import (
    DuplicateParticipantError,
    Engine,
    ProtocolVersionError,
    UnknownParticipantError,
    UnknownStateError,
    UnknownStudyError,
    replay,
)
from protoflow.gateway import NumberPool
from protoflow.packs import load_shipped_pack

START = datetime(2026, 3, 2, 6, 0, tzinfo=timezone.utc)


def audit_kind_count(engine, kind, participant=None):
    return len(engine.audit.records(participant_id=participant, kind=kind))


class TestRegister:
    def test_initial_state_and_audit(self, engine):
        machine = engine.register_participant("tre1", "alice", "+15551234567")
        assert machine.current_state == "WaitingStart"
        assert machine.status == "active"
        trail = engine.audit_trail("alice")
        assert trail[0].kind == audit_kinds.TRANSITION
        assert trail[0].detail["event"] == "register"
        # the WaitingStart daily reminder is armed on entry
        assert any(
            e.timer_id.startswith("@WaitingStart/") for e in engine.timers.active_timers()
        )

    def test_duplicate_participant(self, engine):
        engine.register_participant("tre1", "alice", "+15551234567")
        with pytest.raises(DuplicateParticipantError):
            engine.register_participant("tre1", "alice", "+15559998888")

    def test_duplicate_address(self, engine):
        engine.register_participant("tre1", "alice", "+15551234567")
        with pytest.raises(DuplicateParticipantError):
            engine.register_participant("tre1", "bob", "+15551234567")

    def test_unknown_study(self, engine):
        with pytest.raises(UnknownStudyError):
            engine.register_participant("nope", "alice", "+15551234567")


class TestDispatch:
    def test_startcal_moves_to_eating(self, engine, participant):
        outcome = engine.submit_text("alice", "startcal 8:00am")
        assert outcome.result == "applied"
        assert outcome.from_state == "WaitingStart"
        assert outcome.to_state == "Eating"

    def test_endcal_before_startcal_rejected_and_audited(self, engine, participant):
        machine = engine.machines["alice"]
        before = (machine.current_state, dict(machine.context), machine.state_entered_at)
        outcome = engine.submit_text("alice", "endcal 6pm")
        assert outcome.result == "no_match"
        after = (machine.current_state, dict(machine.context), machine.state_entered_at)
        assert before == after
        rejections = engine.audit.records(participant_id="alice",
                                          kind=audit_kinds.REJECTION)
        assert len(rejections) == 1
        assert rejections[0].detail["category"] == "no_match"

    def test_unknown_participant_errors(self, engine):
        with pytest.raises(UnknownParticipantError):
            engine.submit_text("ghost", "startcal")

    def test_withdrawn_events_audited_never_applied(self, engine, participant):
        engine.withdraw("alice", "dr_smith", "participant request")
        outcome = engine.submit_text("alice", "startcal 8am")
        assert outcome.result == "rejected"
        assert engine.machines["alice"].current_state == "WaitingStart"
        rejection = engine.audit.records(participant_id="alice",
                                         kind=audit_kinds.REJECTION)[-1]
        assert rejection.detail["category"] == "withdrawn"

    def test_message_in_audited_per_inbound(self, engine, participant):
        for body in ("startcal 8am", "endcal 6pm", "gibberish"):
            engine.submit_text("alice", body)
        assert audit_kind_count(engine, audit_kinds.MESSAGE_IN, "alice") == 3

    def test_unrecognized_sends_canonical_and_counts(self, engine, participant):
        engine.submit_text("alice", "startcal7")
        outbound = engine.gateway.store.outbound
        assert outbound[-1].body.startswith("Your STARTCAL time was not understood")
        assert engine.studies["tre1"].metrics.unrecognized == 1

    def test_internal_self_transition_preserves_entry_clock(self, engine, participant):
        clock = engine.clock
        engine.submit_text("alice", "startcal 8:00am")
        machine = engine.machines["alice"]
        entered = machine.state_entered_at
        timers_before = {e.timer_id for e in engine.timers.active_timers()}
        clock.advance(timedelta(hours=11, minutes=1))
        outcomes = engine.tick()
        applied = [o for o in outcomes if o.result == "applied"]
        assert len(applied) == 1 and applied[0].to_state == "Eating"
        assert machine.current_state == "Eating"
        assert machine.state_entered_at == entered
        # the 24h escalation timer survived the internal reminder
        assert any("@Eating/1" == e.timer_id for e in engine.timers.active_timers())
        reminder = engine.gateway.store.outbound[-1]
        assert "11 hour" in reminder.body

    def test_stalled_escalation_after_24h(self, engine, participant):
        engine.submit_text("alice", "startcal 8:00am")
        engine.clock.advance(timedelta(hours=24, minutes=1))
        engine.tick()
        machine = engine.machines["alice"]
        assert machine.current_state == "Stalled"
        notifications = engine.audit.records(kind=audit_kinds.NOTIFICATION,
                                             participant_id="alice")
        assert any("24 hours" in n.detail["reason"] for n in notifications)
        # staff got a message
        staff_out = [m for m in engine.gateway.store.outbound
                     if m.to_address == "+15559990000"]
        assert staff_out

    def test_guard_order_first_satisfied_wins(self, clock):
        from protoflow.dsl import compile_protocol, parse_protocol
        from protoflow.packs import ProtocolPack

        source = (
            'protocol "guards" { state A initial; state B; state C;'
            ' A -> B on message "go" guard low;'
            ' A -> C on message "go" guard high; }'
        )
        graph, _ = parse_protocol(source)
        guards = {
            "low": lambda ctx, payload: int(payload["body"].split()[1]) < 10,
            "high": lambda ctx, payload: True,
        }
        pack = ProtocolPack(
            name="guards", path=None, graph=graph,
            compiled=compile_protocol(graph, known_guards=set(guards)),
            templates={}, tools=[], guards=guards,
        )
        engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
        engine.create_study("g", "guards", pack)
        engine.register_participant("g", "p1", "+15551110000")
        assert engine.submit_text("p1", "go 5").to_state == "B"
        engine.manual_transition("p1", "A", "tester", "reset")
        assert engine.submit_text("p1", "go 50").to_state == "C"


class TestManual:
    def test_move_stuck_participant(self, engine, participant):
        engine.submit_text("alice", "startcal 8am")
        outcome = engine.manual_transition("alice", "WaitingStart", "dr_smith",
                                           "missed endcal")
        assert outcome.result == "applied"
        assert engine.machines["alice"].current_state == "WaitingStart"
        manual = engine.audit.records(participant_id="alice", kind=audit_kinds.MANUAL)
        assert manual[-1].detail["actor"] == "dr_smith"
        assert manual[-1].detail["reason"] == "missed endcal"

    def test_unknown_target_state(self, engine, participant):
        with pytest.raises(UnknownStateError):
            engine.manual_transition("alice", "Mars", "dr_smith", "oops")

    def test_manual_into_terminal_completes(self, clock):
        engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
        engine.create_study("ct", "optimalct", load_shipped_pack("optimalct"))
        engine.register_participant("ct", "pat", "+15551112222")
        outcome = engine.manual_transition("pat", "Documented", "dr_smith",
                                           "paper documentation")
        assert outcome.result == "applied"
        machine = engine.machines["pat"]
        assert machine.status == "completed"
        assert machine.current_state == "Documented"
        assert engine.timers.active_timers() == []


class TestAuditTrailAndReplay:
    def test_register_plus_startcal_trail(self, engine, participant):
        engine.submit_text("alice", "startcal 8:00am")
        kinds = [r.kind for r in engine.audit_trail("alice")]
        assert audit_kinds.MESSAGE_IN in kinds
        assert kinds.count(audit_kinds.TRANSITION) == 2  # register + startcal

    def test_empty_range(self, engine, participant):
        assert engine.audit_trail("alice", since_seq=10_000) == []

    def test_replay_register_only(self, engine, participant):
        state = engine.replay_participant("alice")
        assert state == "WaitingStart" == engine.machines["alice"].current_state

    def test_replay_equals_live_after_cycle(self, engine, participant):
        engine.submit_text("alice", "startcal 8:00am")
        engine.clock.advance(timedelta(hours=10))
        engine.submit_text("alice", "endcal 6:00pm")
        assert engine.replay_participant("alice") == \
            engine.machines["alice"].current_state == "WaitingStart"

    def test_replay_with_manual_moves(self, engine, participant):
        engine.submit_text("alice", "startcal 8am")
        engine.manual_transition("alice", "Stalled", "dr_smith", "testing")
        assert engine.replay_participant("alice") == "Stalled"

    def test_replay_version_mismatch_rejected(self, engine, participant):
        engine.submit_text("alice", "startcal 8am")
        other = load_shipped_pack("optimalct").compiled
        with pytest.raises(ProtocolVersionError):
            replay(engine.audit_trail("alice"), other)


class TestFuzzedInvariants:
    BODIES = [
        "startcal", "endcal", "startcal 8:00am", "endcal 6:30pm", "startcal7",
        "hello", "ENDCAL 7pm", "startcal 9am",
    ]

    def test_random_event_sequences_hold_invariants(self):
        rng = Random(24)
        for run in range(20):
            clock = VirtualClock(START)
            engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
            engine.create_study("tre1", "TRE", load_shipped_pack("tre"),
                                staff_addresses=("+15559990000",))
            pids = [f"p{i}" for i in range(3)]
            for i, pid in enumerate(pids):
                engine.register_participant("tre1", pid, f"+1555000{i:04d}")
            table_states = set(engine.studies["tre1"].compiled.states)
            inbound_sent = 0
            for _ in range(30):
                action = rng.random()
                pid = rng.choice(pids)
                machine = engine.machines[pid]
                before = (machine.current_state, copy.deepcopy(machine.context),
                          machine.state_entered_at)
                if action < 0.7:
                    outcome = engine.submit_text(pid, rng.choice(self.BODIES))
                    inbound_sent += 1
                    if outcome.result in ("rejected", "no_match"):
                        after = (machine.current_state, machine.context,
                                 machine.state_entered_at)
                        assert after == before
                elif action < 0.85:
                    clock.advance(timedelta(minutes=rng.randint(5, 90)))
                    engine.tick()
                else:
                    target = rng.choice(sorted(table_states))
                    engine.manual_transition(pid, target, "fuzzer", "chaos")
                assert machine.current_state in table_states
            # audit completeness: every inbound message audited
            assert audit_kind_count(engine, audit_kinds.MESSAGE_IN) == inbound_sent
            # replay equivalence for every participant
            for pid in pids:
                assert engine.replay_participant(pid) == \
                    engine.machines[pid].current_state

    def test_outbound_counts_reconcile_with_audit(self, engine, participant):
        engine.submit_text("alice", "startcal 8am")
        engine.clock.advance(timedelta(hours=10))
        engine.submit_text("alice", "endcal 6pm")
        engine.submit_text("alice", "startcal7")
        out_records = audit_kind_count(engine, audit_kinds.MESSAGE_OUT)
        assert out_records == len(engine.gateway.store.outbound)


def test_enrolled_days(engine, participant):
    machine = engine.machines["alice"]
    assert engine.enrolled_days(machine) == 1
    engine.clock.advance(timedelta(days=3))
    assert engine.enrolled_days(machine) == 4
