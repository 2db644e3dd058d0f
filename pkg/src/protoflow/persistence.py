"""Periodic full-state snapshots with atomic writes and exact restore.

A snapshot is canonical JSON (sorted keys), gzip-compressed, written to a
temp file and renamed into place, so a crash leaves either the previous or
the new snapshot fully readable. Restore refuses protocol packs whose hashes
differ from the ones recorded in the snapshot, falls back to the previous
retained snapshot when the newest is corrupt, and can replay the audit-log
tail written after the snapshot to close the gap (an extension past the
periodic-save design; sends queued during the gap follow at-least-once
semantics).
"""
from __future__ import annotations

import gzip
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

from . import audit as audit_kinds
from .audit import AuditLog, AuditRecord, SegmentWriter
from .clock import iso, parse_iso
from .dsl import TimerTrigger
from .engine import (
    ACTIVE,
    COMPLETED,
    WITHDRAWN,
    Engine,
    ParticipantMachine,
    Study,
    StudyMetrics,
)
from .scheduler import DailyAt, TimerService, next_daily_occurrence
from .tre import FastRecord

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class SnapshotRestoreError(Exception):
    pass


@dataclass(frozen=True)
class SnapshotPolicy:
    interval: timedelta = timedelta(minutes=15)
    retain: int = 8

    def __post_init__(self):
        if self.interval <= timedelta(0):
            raise ValueError("snapshot interval must be positive")


# ---------------------------------------------------------------------------
# capture


def snapshot_doc(engine: Engine, sequence: int) -> dict:
    """Capture the full engine state between events."""
    with engine._lock:
        return {
            "format_version": FORMAT_VERSION,
            "sequence": sequence,
            "taken_at": iso(engine.clock.now()),
            "studies": [
                {
                    "study_id": s.study_id,
                    "name": s.name,
                    "pack_name": s.pack.name,
                    "timezone_default": s.timezone_default,
                    "staff_addresses": list(s.staff_addresses),
                    "status": s.status,
                    "created_at": iso(s.created_at),
                    "protocol_version": s.pack.compiled.version_hash,
                    "metrics": s.metrics.to_doc(),
                }
                for s in engine.studies.values()
            ],
            "participants": [m.to_doc() for m in engine.machines.values()],
            "timers": engine.timers.snapshot_state(),
            "pending_outbound": engine.gateway.snapshot_pending(),
            "sessions": engine.conversations.snapshot_sessions(),
            "consumed_sessions": sorted(engine._consumed_sessions),
            "event_seq": engine._event_seq,
            "audit_seq": engine.audit.next_seq,
        }


def encode_snapshot(doc: dict) -> bytes:
    return gzip.compress(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode(), mtime=0
    )


def write_snapshot(doc: dict, directory: str | Path) -> Path:
    """Atomic write: temp file, fsync, rename."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"snap-{doc['sequence']}.json.gz"
    tmp = directory / f".snap-{doc['sequence']}.tmp"
    data = encode_snapshot(doc)
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def read_snapshot(path: str | Path) -> dict:
    doc = json.loads(gzip.decompress(Path(path).read_bytes()))
    if doc.get("format_version") != FORMAT_VERSION:
        raise SnapshotRestoreError(
            f"{path}: unsupported snapshot format {doc.get('format_version')!r}"
        )
    return doc


class SnapshotManager:
    """Numbered snapshots in one directory with retention pruning."""

    def __init__(self, directory: str | Path, policy: SnapshotPolicy | None = None):
        self.directory = Path(directory)
        self.policy = policy or SnapshotPolicy()
        self.directory.mkdir(parents=True, exist_ok=True)
        self._last_taken: datetime | None = None

    def list_snapshots(self) -> list[Path]:
        return sorted(
            self.directory.glob("snap-*.json.gz"),
            key=lambda p: int(p.name.split("-")[1].split(".")[0]),
        )

    def next_sequence(self) -> int:
        existing = self.list_snapshots()
        if not existing:
            return 1
        return int(existing[-1].name.split("-")[1].split(".")[0]) + 1

    def take(self, engine: Engine) -> Path:
        sequence = self.next_sequence()
        doc = snapshot_doc(engine, sequence)
        path = write_snapshot(doc, self.directory)
        engine.audit.append(
            audit_kinds.SNAPSHOT_MARKER, None, engine.clock.now(),
            {"sequence": sequence, "path": path.name},
        )
        engine.audit.sync()
        self._last_taken = engine.clock.now()
        self._prune()
        return path

    def due(self, now: datetime) -> bool:
        if self._last_taken is None:
            return True
        return now - self._last_taken >= self.policy.interval

    def _prune(self) -> None:
        snapshots = self.list_snapshots()
        for stale in snapshots[: max(0, len(snapshots) - self.policy.retain)]:
            stale.unlink()

    def load_latest(self) -> tuple[dict, Path]:
        """Newest readable snapshot, falling back past corrupt files."""
        candidates = list(reversed(self.list_snapshots()))
        if not candidates:
            raise SnapshotRestoreError(f"no snapshots in {self.directory}")
        for path in candidates:
            try:
                return read_snapshot(path), path
            except (OSError, ValueError, EOFError, json.JSONDecodeError) as exc:
                logger.warning("snapshot %s unreadable (%s); trying previous", path, exc)
        raise SnapshotRestoreError(f"no readable snapshot in {self.directory}")


# ---------------------------------------------------------------------------
# restore


def _verify_pack_hashes(doc: dict, packs: dict) -> None:
    for study_doc in doc["studies"]:
        pack = packs.get(study_doc["pack_name"])
        if pack is None:
            raise SnapshotRestoreError(
                f"study {study_doc['study_id']}: protocol pack "
                f"{study_doc['pack_name']!r} was not provided"
            )
        if pack.compiled.version_hash != study_doc["protocol_version"]:
            raise SnapshotRestoreError(
                f"study {study_doc['study_id']}: pack {pack.name!r} hash "
                f"{pack.compiled.version_hash[:12]}… does not match snapshot "
                f"{study_doc['protocol_version'][:12]}…"
            )


def restore_engine(
    doc: dict,
    packs: dict,
    clock=None,
    pool=None,
    provider=None,
    llm_backend=None,
    audit_writer: SegmentWriter | None = None,
    prior_records: list[AuditRecord] | None = None,
) -> Engine:
    """Rebuild an engine from a snapshot document.

    ``packs`` maps pack name to a loaded ProtocolPack whose hash must match
    the snapshot. ``prior_records`` rehydrates the in-memory audit view (and
    is the source for tail replay via replay_audit_tail)."""
    _verify_pack_hashes(doc, packs)
    audit_log = AuditLog(writer=audit_writer, next_seq=doc["audit_seq"])
    if prior_records:
        audit_log.extend_from(prior_records)
        audit_log._next_seq = max(audit_log.next_seq, doc["audit_seq"])
    engine = Engine(clock=clock, pool=pool, audit_log=audit_log, llm_backend=llm_backend,
                    provider=provider)
    for study_doc in doc["studies"]:
        pack = packs[study_doc["pack_name"]]
        study = Study(
            study_id=study_doc["study_id"],
            name=study_doc["name"],
            pack=pack,
            timezone_default=study_doc["timezone_default"],
            staff_addresses=tuple(study_doc["staff_addresses"]),
            created_at=parse_iso(study_doc["created_at"]),
            status=study_doc["status"],
            metrics=StudyMetrics.from_doc(study_doc["metrics"]),
        )
        engine.studies[study.study_id] = study
        for tool in pack.tools:
            engine.conversations.register_tool(tool)
    for machine_doc in doc["participants"]:
        machine = ParticipantMachine.from_doc(machine_doc)
        engine.machines[machine.participant_id] = machine
        engine._address_index[machine.contact_address] = machine.participant_id
    engine.timers = TimerService.restore_state(doc["timers"])
    engine.gateway.restore_pending(doc["pending_outbound"])
    engine.conversations.restore_sessions(doc["sessions"])
    engine._consumed_sessions = set(doc.get("consumed_sessions", []))
    engine._event_seq = doc["event_seq"]
    return engine


def replay_audit_tail(engine: Engine, doc: dict, records: list[AuditRecord]) -> int:
    """Re-apply state changes recorded after the snapshot was taken: pure
    state only, no actions re-run, no messages re-sent. Returns the number of
    records applied."""
    tail = [r for r in records if r.seq >= doc["audit_seq"]]
    applied = 0
    for record in tail:
        applied += _apply_tail_record(engine, record)
    return applied


def _apply_tail_record(engine: Engine, record: AuditRecord) -> int:
    detail = record.detail
    kind = record.kind
    if kind == audit_kinds.TRANSITION:
        if detail.get("event") == "register":
            _tail_register(engine, record)
        else:
            _tail_transition(engine, record)
        return 1
    if kind == audit_kinds.MANUAL:
        machine = engine.machines.get(record.participant_id)
        if machine is None:
            return 0
        if detail.get("action") == "withdraw":
            machine.status = WITHDRAWN
            engine.timers.cancel_participant(machine.participant_id)
        elif detail.get("action") == "transition":
            study = engine.studies[machine.study_id]
            engine._disarm_state_timers(machine, machine.current_state)
            machine.current_state = detail["target"]
            machine.state_entered_at = record.timestamp
            machine.context = dict(detail.get("context_after", machine.context))
            state = study.compiled.states[detail["target"]]
            if state.terminal:
                machine.status = COMPLETED
                engine.timers.cancel_participant(machine.participant_id)
            else:
                if machine.status == COMPLETED:
                    machine.status = ACTIVE
                engine._arm_state_timers(machine, study, detail["target"], record.timestamp)
        return 1
    if kind == audit_kinds.MESSAGE_IN:
        machine = engine.machines.get(record.participant_id)
        if machine is not None:
            engine.studies[machine.study_id].metrics.total_incoming += 1
        _tail_session_outcome(engine, record)
        return 1
    if kind == audit_kinds.REJECTION:
        machine = engine.machines.get(record.participant_id)
        if machine is not None and detail.get("category") == "unrecognized":
            engine.studies[machine.study_id].metrics.unrecognized += 1
        _tail_rejected_timer(engine, record)
        return 1
    if kind == audit_kinds.NOTIFICATION:
        category = detail.get("category")
        if category == "session_opened":
            _tail_session_opened(engine, record)
        elif category == "conversation_escalated":
            machine = engine.machines.get(record.participant_id)
            if machine is not None:
                engine.studies[machine.study_id].metrics.escalations += 1
        return 1
    return 0


def _tail_register(engine: Engine, record: AuditRecord) -> None:
    detail = record.detail
    study = engine.studies.get(detail["study_id"])
    if study is None:
        logger.warning("tail replay: register for unknown study %s", detail["study_id"])
        return
    machine = ParticipantMachine(
        participant_id=record.participant_id,
        study_id=detail["study_id"],
        protocol_version=detail["protocol_version"],
        current_state=detail["to"],
        state_entered_at=record.timestamp,
        registered_at=record.timestamp,
        contact_address=detail.get("contact_address", ""),
        timezone=detail.get("timezone", study.timezone_default),
        context=dict(detail.get("context_after", {})),
    )
    engine.machines[machine.participant_id] = machine
    if machine.contact_address:
        engine._address_index[machine.contact_address] = machine.participant_id
    engine._arm_state_timers(machine, study, machine.current_state, record.timestamp)


def _tail_transition(engine: Engine, record: AuditRecord) -> None:
    machine = engine.machines.get(record.participant_id)
    if machine is None:
        logger.warning("tail replay: transition for unknown participant %s",
                       record.participant_id)
        return
    study = engine.studies[machine.study_id]
    compiled = study.compiled
    detail = record.detail
    index = detail.get("transition_index")
    transition = compiled.transitions[index] if index is not None else None
    machine.context = dict(detail.get("context_after", machine.context))
    # Metric counters re-applied from the declared actions; effects do not run.
    if transition is not None:
        for action in transition.actions:
            if action.kind == "record_metric":
                study.metrics.bump(action.arg("name"))
    if detail.get("fast"):
        study.metrics.fasts.append(FastRecord.from_doc(detail["fast"]))
    if detail.get("internal"):
        if transition is not None and isinstance(transition.trigger, TimerTrigger):
            _consume_timer(engine, machine, transition, record.timestamp)
        return
    engine._disarm_state_timers(machine, detail["from"])
    machine.current_state = detail["to"]
    machine.state_entered_at = record.timestamp
    state = compiled.states[detail["to"]]
    if state.terminal:
        machine.status = COMPLETED
        engine.timers.cancel_participant(machine.participant_id)
    else:
        engine._arm_state_timers(machine, study, detail["to"], record.timestamp)


def _consume_timer(engine: Engine, machine, transition, at: datetime) -> None:
    """An internal timer transition fired: drop the one-shot, or advance the
    daily recurrence past the firing instant."""
    trigger = transition.trigger
    if trigger.reference == "entry":
        engine.timers.cancel(machine.participant_id, transition.timer_id)
    else:
        nxt = next_daily_occurrence(at, trigger.hh, trigger.mm, machine.timezone)
        engine.timers.schedule_at(
            machine.participant_id, transition.timer_id, nxt,
            recurrence=DailyAt(trigger.hh, trigger.mm, machine.timezone),
            payload={"auto": True},
        )


def _tail_rejected_timer(engine: Engine, record: AuditRecord) -> None:
    """A timer fired but no transition applied (e.g. guard false): the firing
    still consumed the queue entry."""
    detail = record.detail
    trigger_key = detail.get("trigger_key")
    if not trigger_key or trigger_key[0] != "timer":
        return
    machine = engine.machines.get(record.participant_id)
    if machine is None:
        return
    timer_id = trigger_key[1]
    study = engine.studies[machine.study_id]
    for transition in study.compiled.state_timers.get(machine.current_state, []):
        if transition.timer_id == timer_id:
            _consume_timer(engine, machine, transition, record.timestamp)
            return
    engine.timers.cancel(machine.participant_id, timer_id)


def _tail_session_opened(engine: Engine, record: AuditRecord) -> None:
    detail = record.detail
    conversations = engine.conversations
    if detail.get("session_id") in conversations.sessions:
        return
    from .conversations import ConversationSession

    session = ConversationSession(
        session_id=detail["session_id"],
        participant_id=record.participant_id,
        bound_tools=list(detail.get("tools", [])),
        pending_question=detail.get("question", ""),
    )
    conversations.sessions[session.session_id] = session
    counter = int(session.session_id.split("-")[-1])
    conversations._counter = max(conversations._counter, counter)


def _tail_session_outcome(engine: Engine, record: AuditRecord) -> None:
    detail = record.detail
    session_id = detail.get("session_id")
    outcome = detail.get("session_outcome")
    if not session_id or outcome is None:
        return
    session = engine.conversations.sessions.get(session_id)
    if session is None:
        return
    if outcome == "adequate":
        session.status = "satisfied"
        engine._consumed_sessions.add(session_id)
    elif outcome == "escalate":
        session.attempt_count = min(session.attempt_count + 1, 3)
        session.status = "escalated"
    elif outcome == "restate":
        session.attempt_count += 1
