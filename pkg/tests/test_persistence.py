"""Snapshots: atomic capture, exact restore, retention, tail replay."""
from __future__ import annotations

import gzip
import json
from datetime import datetime, timedelta, timezone

import pytest

from protoflow import audit as audit_kinds
from protoflow.audit import AuditLog, SegmentWriter, read_segments
from protoflow.clock import VirtualClock, iso, parse_iso
from protoflow.engine import Engine
from protoflow.gateway import NumberPool
from protoflow.packs import load_pack, load_shipped_pack
from protoflow.persistence import (
    SnapshotManager,
    SnapshotPolicy,
    SnapshotRestoreError,
    read_snapshot,
    replay_audit_tail,
    restore_engine,
    snapshot_doc,
    write_snapshot,
)

START = datetime(2026, 3, 2, 6, 0, tzinfo=timezone.utc)
PACKS = {"tre": load_shipped_pack("tre")}


def make_engine(tmp_path=None, clock=None):
    clock = clock or VirtualClock(START)
    writer = SegmentWriter(tmp_path / "audit") if tmp_path else None
    engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)),
                    audit_log=AuditLog(writer=writer))
    engine.create_study("tre1", "TRE", PACKS["tre"], staff_addresses=("+15559990000",))
    return engine, clock


def strip_volatile(doc: dict) -> dict:
    doc = dict(doc)
    doc.pop("sequence")
    doc.pop("taken_at")
    return doc


class TestSnapshotCapture:
    def test_empty_engine_snapshot(self, tmp_path):
        engine, _ = make_engine()
        doc = snapshot_doc(engine, 1)
        assert doc["participants"] == []
        assert doc["studies"][0]["study_id"] == "tre1"
        path = write_snapshot(doc, tmp_path)
        assert read_snapshot(path) == doc

    def test_mid_study_snapshot_contains_every_timer(self):
        engine, clock = make_engine()
        for i in range(4):
            engine.register_participant("tre1", f"p{i}", f"+155500000{i:02d}")
        engine.submit_text("p0", "startcal 8am")
        doc = snapshot_doc(engine, 1)
        snapshot_keys = {
            (t["participant_id"], t["timer_id"]) for t in doc["timers"]["timers"]
        }
        live_keys = {
            (e.participant_id, e.timer_id) for e in engine.timers.active_timers()
        }
        assert snapshot_keys == live_keys
        assert len(snapshot_keys) >= 5  # 4 daily reminders + eating timers

    def test_two_snapshots_no_events_differ_only_in_housekeeping(self):
        engine, _ = make_engine()
        engine.register_participant("tre1", "p1", "+15551000001")
        first = snapshot_doc(engine, 1)
        second = snapshot_doc(engine, 2)
        assert strip_volatile(first) == strip_volatile(second)

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        engine, _ = make_engine()
        write_snapshot(snapshot_doc(engine, 1), tmp_path)
        assert not list(tmp_path.glob(".snap-*"))
        assert list(tmp_path.glob("snap-1.json.gz"))


class TestRestore:
    def test_take_restore_take_identity(self, tmp_path):
        engine, clock = make_engine()
        for i in range(3):
            engine.register_participant("tre1", f"p{i}", f"+155510000{i:02d}")
        engine.submit_text("p0", "startcal 8:00am")
        engine.submit_text("p1", "startcal7")
        doc = snapshot_doc(engine, 1)
        restored = restore_engine(doc, PACKS, clock=VirtualClock(parse_iso(doc["taken_at"])))
        again = snapshot_doc(restored, 1)
        assert strip_volatile(again) == strip_volatile(doc)

    def test_restored_machines_equal(self):
        engine, clock = make_engine()
        engine.register_participant("tre1", "p1", "+15551000001")
        engine.submit_text("p1", "startcal 8:00am")
        doc = snapshot_doc(engine, 1)
        restored = restore_engine(doc, PACKS, clock=clock)
        original = engine.machines["p1"]
        copy = restored.machines["p1"]
        assert copy.current_state == original.current_state == "Eating"
        assert copy.context == original.context
        assert copy.state_entered_at == original.state_entered_at

    def test_edited_pack_refused(self, tmp_path):
        import shutil

        engine, _ = make_engine()
        doc = snapshot_doc(engine, 1)
        pack_dir = tmp_path / "tre"
        shutil.copytree(load_shipped_pack("tre").path, pack_dir)
        source = (pack_dir / "protocol.pfp").read_text()
        (pack_dir / "protocol.pfp").write_text(
            source.replace('message "endcal"', 'message "stopcal"')
        )
        edited = load_pack(pack_dir)
        with pytest.raises(SnapshotRestoreError, match="hash"):
            restore_engine(doc, {"tre": edited})

    def test_missing_pack_refused(self):
        engine, _ = make_engine()
        doc = snapshot_doc(engine, 1)
        with pytest.raises(SnapshotRestoreError, match="not provided"):
            restore_engine(doc, {})

    def test_downtime_reminder_fires_exactly_once(self):
        # kill 10 simulated minutes before an 11h reminder, restore 20 later
        engine, clock = make_engine()
        engine.register_participant("tre1", "p1", "+15551000001")
        engine.submit_text("p1", "startcal")
        due = START + timedelta(hours=11)
        clock.set_to(due - timedelta(minutes=10))
        engine.tick()
        doc = snapshot_doc(engine, 1)

        restored_clock = VirtualClock(due + timedelta(minutes=10))
        restored = restore_engine(doc, PACKS, clock=restored_clock)
        restored.tick()
        reminders = [m for m in restored.gateway.store.outbound
                     if "11 hour limit" in m.body]
        assert len(reminders) == 1
        restored_clock.advance(timedelta(minutes=5))
        restored.tick()
        reminders = [m for m in restored.gateway.store.outbound
                     if "11 hour limit" in m.body]
        assert len(reminders) == 1

    def test_pending_outbound_survives_restore(self):
        engine, clock = make_engine()
        engine.register_participant("tre1", "p1", "+15551000001")
        for i in range(150):  # more than one second of capacity
            engine.gateway.send("+15551000001", f"m{i}")
        engine.gateway.pump()
        assert engine.gateway.pending
        doc = snapshot_doc(engine, 1)
        restored = restore_engine(doc, PACKS, clock=clock)
        assert [m.body for m in restored.gateway.pending] == \
            [m.body for m in engine.gateway.pending]

    def test_sessions_survive_restore(self):
        from protoflow.conversations import EmrRecord

        packs = {"optimalct": load_shipped_pack("optimalct")}
        clock = VirtualClock(START)
        engine = Engine(clock=clock, pool=NumberPool(numbers=("+19990000001",)))
        engine.create_study("ct", "OptimalCT", packs["optimalct"])
        engine.emr.put(EmrRecord("pat", medications=[("Acebutolol", "morning")]))
        engine.register_participant("ct", "pat", "+15551000001")
        engine.submit_text("pat", "start")
        clock.set_to(datetime(2026, 3, 2, 9, 0, tzinfo=timezone.utc))
        engine.tick()  # opens the morning check-in session
        engine.submit_text("pat", "hmm")  # one inadequate answer
        doc = snapshot_doc(engine, 1)

        restored = restore_engine(doc, packs, clock=clock)
        restored.emr.put(EmrRecord("pat", medications=[("Acebutolol", "morning")]))
        session = restored.conversations.open_session_for("pat")
        assert session is not None
        assert session.attempt_count == 1
        clock.set_to(datetime(2026, 3, 2, 10, 0, tzinfo=timezone.utc))
        restored.submit_text("pat", "I took it this morning")
        assert session.status == "satisfied"
        assert restored.machines["pat"].context["med_checkin.when"] == "this morning"


class TestSnapshotManager:
    def test_retention_prunes_old_snapshots(self, tmp_path):
        engine, clock = make_engine()
        manager = SnapshotManager(tmp_path, SnapshotPolicy(retain=3))
        for _ in range(6):
            clock.advance(timedelta(minutes=16))
            manager.take(engine)
        names = [p.name for p in manager.list_snapshots()]
        assert names == ["snap-4.json.gz", "snap-5.json.gz", "snap-6.json.gz"]

    def test_snapshot_marker_audited(self, tmp_path):
        engine, _ = make_engine()
        manager = SnapshotManager(tmp_path)
        manager.take(engine)
        markers = engine.audit.records(kind=audit_kinds.SNAPSHOT_MARKER)
        assert len(markers) == 1
        assert markers[0].detail["sequence"] == 1

    def test_due_respects_interval(self, tmp_path):
        engine, clock = make_engine()
        manager = SnapshotManager(tmp_path, SnapshotPolicy(interval=timedelta(minutes=15)))
        assert manager.due(clock.now())
        manager.take(engine)
        assert not manager.due(clock.now())
        clock.advance(timedelta(minutes=15))
        assert manager.due(clock.now())

    def test_corrupt_latest_falls_back_to_previous(self, tmp_path):
        engine, clock = make_engine()
        manager = SnapshotManager(tmp_path)
        manager.take(engine)
        engine.register_participant("tre1", "p1", "+15551000001")
        second = manager.take(engine)
        second.write_bytes(b"garbage, not gzip")
        doc, path = manager.load_latest()
        assert path.name == "snap-1.json.gz"
        assert doc["participants"] == []

    def test_no_readable_snapshot_raises(self, tmp_path):
        manager = SnapshotManager(tmp_path)
        with pytest.raises(SnapshotRestoreError):
            manager.load_latest()

    def test_format_version_checked(self, tmp_path):
        engine, _ = make_engine()
        doc = snapshot_doc(engine, 1)
        doc["format_version"] = 99
        path = tmp_path / "snap-1.json.gz"
        path.write_bytes(gzip.compress(json.dumps(doc).encode()))
        with pytest.raises(SnapshotRestoreError, match="format"):
            read_snapshot(path)


class TestAuditTailReplay:
    def test_tail_registration_and_transitions_rebuilt(self, tmp_path):
        engine, clock = make_engine(tmp_path)
        engine.register_participant("tre1", "p1", "+15551000001")
        doc = snapshot_doc(engine, 1)
        # post-snapshot activity: a registration and a transition
        engine.register_participant("tre1", "p2", "+15551000002")
        engine.submit_text("p1", "startcal 8:00am")
        engine.audit.close()
        records, _ = read_segments(tmp_path / "audit")

        restored = restore_engine(
            doc, PACKS, clock=VirtualClock(clock.now()), prior_records=records
        )
        applied = replay_audit_tail(restored, doc, records)
        assert applied > 0
        assert set(restored.machines) == {"p1", "p2"}
        assert restored.machines["p1"].current_state == "Eating"
        assert restored.machines["p1"].context["fast_start_at"] == iso(
            parse_iso("2026-03-02T08:00:00Z")
        )
        assert restored.machines["p2"].current_state == "WaitingStart"
        # p1's Eating timers re-armed, not duplicated
        eating_timers = [e for e in restored.timers.active_timers()
                         if e.participant_id == "p1"]
        assert {e.timer_id for e in eating_timers} == {"@Eating/0", "@Eating/1"}

    def test_tail_metrics_recounted(self, tmp_path):
        engine, clock = make_engine(tmp_path)
        engine.register_participant("tre1", "p1", "+15551000001")
        doc = snapshot_doc(engine, 1)
        engine.submit_text("p1", "startcal 8:00am")
        clock.advance(timedelta(hours=10))
        engine.submit_text("p1", "endcal 6:00pm")
        engine.submit_text("p1", "startcal7")
        engine.audit.close()
        records, _ = read_segments(tmp_path / "audit")

        restored = restore_engine(doc, PACKS, clock=VirtualClock(clock.now()),
                                  prior_records=records)
        replay_audit_tail(restored, doc, records)
        live = engine.studies["tre1"].metrics
        rebuilt = restored.studies["tre1"].metrics
        assert rebuilt.total_incoming == live.total_incoming == 3
        assert rebuilt.unrecognized == live.unrecognized == 1
        assert [f.to_doc() for f in rebuilt.fasts] == [f.to_doc() for f in live.fasts]
        assert rebuilt.counters == live.counters

    def test_tail_guard_false_timer_consumption(self, tmp_path):
        # 20:00 reminder fires with guard false: the recurrence advances and
        # tail replay must not leave a duplicate past-due timer
        engine, clock = make_engine(tmp_path)
        engine.register_participant("tre1", "p1", "+15551000001")
        engine.submit_text("p1", "startcal 8:00am")
        clock.advance(timedelta(hours=4))
        engine.submit_text("p1", "endcal 6:00pm")
        doc = snapshot_doc(engine, 1)
        clock.set_to(datetime(2026, 3, 2, 20, 0, tzinfo=timezone.utc))
        engine.tick()  # guard false: startcal already today
        engine.audit.close()
        records, _ = read_segments(tmp_path / "audit")

        restored = restore_engine(doc, PACKS, clock=VirtualClock(clock.now()),
                                  prior_records=records)
        replay_audit_tail(restored, doc, records)
        live = sorted((e.timer_id, iso(e.due_at)) for e in engine.timers.active_timers())
        rebuilt = sorted((e.timer_id, iso(e.due_at))
                         for e in restored.timers.active_timers())
        assert rebuilt == live
