"""Participant state-machine runtime.

One engine hosts many studies (multi-tenancy) and one machine per
participant. A single logical executor mutates machines: every external
entry point funnels through one lock, events are processed strictly in
arrival order, and every message, transition, rejection, and manual action
lands in the audit log. Participants can only move along compiled
transitions or audited manual overrides.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from zoneinfo import ZoneInfo

from . import audit as audit_kinds
from .audit import AuditLog, AuditRecord
from .clock import SystemClock, as_utc, iso, parse_iso
from .conversations import ConversationManager, EmrStore
from .dsl import CompiledProtocol, CompiledTransition, TimerTrigger
from .gateway import Attachment, InboundMessage, MessagingGateway, NumberPool
from .packs import ClassifiedMessage, EffectContext, ProtocolPack, RejectedMessage
from .scheduler import DailyAt, TimedEvent, TimerService, next_daily_occurrence
from .tre import AdherenceMetrics, FastRecord

logger = logging.getLogger(__name__)

ACTIVE = "active"
COMPLETED = "completed"
WITHDRAWN = "withdrawn"


class UnknownStudyError(KeyError):
    pass


class UnknownParticipantError(KeyError):
    pass


class DuplicateParticipantError(ValueError):
    pass


class UnknownStateError(ValueError):
    pass


@dataclass
class ParticipantMachine:
    participant_id: str
    study_id: str
    protocol_version: str
    current_state: str
    state_entered_at: datetime
    registered_at: datetime
    contact_address: str
    timezone: str
    context: dict = field(default_factory=dict)
    status: str = ACTIVE

    def to_doc(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "study_id": self.study_id,
            "protocol_version": self.protocol_version,
            "current_state": self.current_state,
            "state_entered_at": iso(self.state_entered_at),
            "registered_at": iso(self.registered_at),
            "contact_address": self.contact_address,
            "timezone": self.timezone,
            "context": dict(self.context),
            "status": self.status,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ParticipantMachine":
        return cls(
            participant_id=doc["participant_id"],
            study_id=doc["study_id"],
            protocol_version=doc["protocol_version"],
            current_state=doc["current_state"],
            state_entered_at=parse_iso(doc["state_entered_at"]),
            registered_at=parse_iso(doc["registered_at"]),
            contact_address=doc["contact_address"],
            timezone=doc["timezone"],
            context=dict(doc["context"]),
            status=doc["status"],
        )


@dataclass
class StudyMetrics:
    counters: dict = field(default_factory=dict)
    total_incoming: int = 0
    unrecognized: int = 0
    escalations: int = 0
    fasts: list = field(default_factory=list)

    def bump(self, name: str, by: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + by

    def to_doc(self) -> dict:
        return {
            "counters": dict(self.counters),
            "total_incoming": self.total_incoming,
            "unrecognized": self.unrecognized,
            "escalations": self.escalations,
            "fasts": [f.to_doc() for f in self.fasts],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "StudyMetrics":
        m = cls(
            counters=dict(doc["counters"]),
            total_incoming=doc["total_incoming"],
            unrecognized=doc["unrecognized"],
            escalations=doc["escalations"],
        )
        m.fasts = [FastRecord.from_doc(f) for f in doc["fasts"]]
        return m


@dataclass
class Study:
    study_id: str
    name: str
    pack: ProtocolPack
    timezone_default: str
    staff_addresses: tuple[str, ...]
    created_at: datetime
    status: str = "active"
    metrics: StudyMetrics = field(default_factory=StudyMetrics)

    @property
    def compiled(self) -> CompiledProtocol:
        return self.pack.compiled


@dataclass(frozen=True)
class EngineEvent:
    event_id: int
    kind: str  # inbound_message | timer_fired | tool_result | manual_transition
    participant_id: str
    payload: dict
    occurred_at: datetime


@dataclass(frozen=True)
class TransitionOutcome:
    result: str  # applied | rejected | no_match
    from_state: str | None = None
    to_state: str | None = None
    actions_emitted: tuple = ()
    reason: str | None = None
    transition: CompiledTransition | None = None

    @property
    def applied(self) -> bool:
        return self.result == "applied"


class ProtocolVersionError(Exception):
    pass


def replay(records: list[AuditRecord], protocol: CompiledProtocol) -> str | None:
    """Re-derive a participant's current state purely from their audit trail.
    Raises ProtocolVersionError when the trail was produced under a different
    protocol hash."""
    state: str | None = None
    for record in records:
        if record.kind == audit_kinds.TRANSITION:
            detail = record.detail
            version = detail.get("protocol_version")
            if version is not None and version != protocol.version_hash:
                raise ProtocolVersionError(
                    f"trail written under protocol {version[:12]}…, "
                    f"expected {protocol.version_hash[:12]}…"
                )
            state = detail["to"]
        elif record.kind == audit_kinds.MANUAL and record.detail.get("action") == "transition":
            state = record.detail["target"]
        else:
            continue
        if state is not None and not protocol.has_state(state):
            raise ProtocolVersionError(f"trail reaches unknown state {state!r}")
    return state


class Engine:
    """Single-writer runtime hosting studies, machines, timers, the gateway,
    and conversation sessions."""

    def __init__(
        self,
        clock=None,
        pool: NumberPool | None = None,
        audit_log: AuditLog | None = None,
        llm_backend=None,
        provider=None,
    ):
        self.clock = clock or SystemClock()
        self.audit = audit_log or AuditLog()
        self._lock = threading.RLock()
        self._event_seq = 0
        self.studies: dict[str, Study] = {}
        self.machines: dict[str, ParticipantMachine] = {}
        self._address_index: dict[str, str] = {}
        self.timers = TimerService()
        self.emr = EmrStore()
        self.gateway = MessagingGateway(
            clock=self.clock,
            pool=pool or NumberPool(numbers=("+15550000001",)),
            provider=provider,
            resolve_address=self._resolve_address,
            route_inbound=self._route_inbound,
            on_dead_letter=self._on_dead_letter,
            on_delivery_failed=self._on_delivery_failed,
        )
        self.conversations = ConversationManager(
            backend=llm_backend,
            emr=self.emr,
            send_text=self._send_to_participant_id,
            notify_staff=self._notify_staff_for_participant,
            emit_tool_result=self._queue_tool_result,
            clock=self.clock,
            on_backend_failure=self._on_backend_failure,
        )
        self._pending_tool_results: list[EngineEvent] = []
        self._consumed_sessions: set[str] = set()
        self.on_snapshot_marker = None  # persistence hooks in

    # ------------------------------------------------------------------
    # wiring callbacks

    def _resolve_address(self, address: str) -> str | None:
        return self._address_index.get(address)

    def _route_inbound(self, msg: InboundMessage, participant_id: str) -> None:
        self.submit_inbound(participant_id, msg)

    def _on_dead_letter(self, letter) -> None:
        self.audit.append(
            audit_kinds.NOTIFICATION, None, self.clock.now(),
            {"reason": f"dead-lettered message: {letter.reason}", "category": "dead_letter"},
        )
        for study in self.studies.values():
            self._send_staff(study, f"Dead-lettered inbound message: {letter.reason}")
            break  # one alert is enough; the dead-letter store has the payload

    def _on_delivery_failed(self, msg) -> None:
        self.audit.append(
            audit_kinds.NOTIFICATION, None, self.clock.now(),
            {
                "reason": f"message {msg.message_id} to {msg.to_address} failed after "
                          f"{msg.send_attempts} attempts",
                "category": "delivery_failure",
            },
        )

    def _send_to_participant_id(self, participant_id: str, text: str) -> None:
        machine = self.machines.get(participant_id)
        if machine is None:
            return
        self._send_text(machine, text)

    def _notify_staff_for_participant(self, participant_id: str, reason: str, category: str) -> None:
        machine = self.machines.get(participant_id)
        study = self.studies.get(machine.study_id) if machine else None
        self._notify_staff(study, participant_id, reason, category)

    def _on_backend_failure(self, session_id: str, error: str) -> None:
        self.audit.append(
            audit_kinds.NOTIFICATION, None, self.clock.now(),
            {"reason": f"extraction backend failed for session {session_id}: {error}",
             "category": "backend_failure", "session_id": session_id},
        )

    def _queue_tool_result(
        self, participant_id: str, session_id: str, tool: str, outcome: str, values: dict
    ) -> None:
        self._event_seq += 1
        self._pending_tool_results.append(
            EngineEvent(
                event_id=self._event_seq,
                kind="tool_result",
                participant_id=participant_id,
                payload={"session_id": session_id, "tool": tool, "outcome": outcome,
                         "values": dict(values)},
                occurred_at=self.clock.now(),
            )
        )

    # ------------------------------------------------------------------
    # studies and participants

    def create_study(
        self,
        study_id: str,
        name: str,
        pack: ProtocolPack,
        timezone_default: str = "UTC",
        staff_addresses: tuple[str, ...] = (),
    ) -> Study:
        with self._lock:
            if study_id in self.studies:
                raise ValueError(f"study {study_id!r} already exists")
            study = Study(
                study_id=study_id,
                name=name,
                pack=pack,
                timezone_default=timezone_default,
                staff_addresses=tuple(staff_addresses),
                created_at=self.clock.now(),
            )
            self.studies[study_id] = study
            for tool in pack.tools:
                self.conversations.register_tool(tool)
            self.audit.append(
                audit_kinds.NOTIFICATION, None, self.clock.now(),
                {"reason": f"study {study_id} created with protocol "
                           f"{pack.compiled.protocol_id}", "category": "study_created",
                 "study_id": study_id, "name": name, "pack_name": pack.name,
                 "timezone_default": timezone_default,
                 "staff_addresses": list(staff_addresses),
                 "protocol_version": pack.compiled.version_hash},
            )
            return study

    def register_participant(
        self,
        study_id: str,
        participant_id: str,
        contact_address: str,
        timezone: str | None = None,
    ) -> ParticipantMachine:
        with self._lock:
            study = self.studies.get(study_id)
            if study is None:
                raise UnknownStudyError(study_id)
            if participant_id in self.machines:
                raise DuplicateParticipantError(participant_id)
            if contact_address in self._address_index:
                raise DuplicateParticipantError(
                    f"address {contact_address} already registered"
                )
            now = self.clock.now()
            compiled = study.compiled
            machine = ParticipantMachine(
                participant_id=participant_id,
                study_id=study_id,
                protocol_version=compiled.version_hash,
                current_state=compiled.initial_state,
                state_entered_at=now,
                registered_at=now,
                contact_address=contact_address,
                timezone=timezone or study.timezone_default,
            )
            self.machines[participant_id] = machine
            self._address_index[contact_address] = participant_id
            self.audit.append(
                audit_kinds.TRANSITION, participant_id, now,
                {
                    "event": "register",
                    "to": compiled.initial_state,
                    "study_id": study_id,
                    "protocol_version": compiled.version_hash,
                    "contact_address": contact_address,
                    "timezone": machine.timezone,
                    "context_after": dict(machine.context),
                },
            )
            self._enter_state(machine, study, compiled.states[compiled.initial_state],
                              payload={}, now=now)
            self._flush_tool_results()
            return machine

    def withdraw(self, participant_id: str, actor_id: str, reason: str) -> None:
        with self._lock:
            machine = self._machine(participant_id)
            machine.status = WITHDRAWN
            self.timers.cancel_participant(participant_id)
            self.audit.append(
                audit_kinds.MANUAL, participant_id, self.clock.now(),
                {"action": "withdraw", "actor": actor_id, "reason": reason},
            )

    def _machine(self, participant_id: str) -> ParticipantMachine:
        machine = self.machines.get(participant_id)
        if machine is None:
            raise UnknownParticipantError(participant_id)
        return machine

    def list_participants(self, study_id: str, state: str | None = None) -> list[ParticipantMachine]:
        with self._lock:
            if study_id not in self.studies:
                raise UnknownStudyError(study_id)
            return [
                m for m in self.machines.values()
                if m.study_id == study_id and (state is None or m.current_state == state)
            ]

    # ------------------------------------------------------------------
    # event intake

    def submit_inbound(self, participant_id: str, msg: InboundMessage) -> TransitionOutcome:
        with self._lock:
            self._event_seq += 1
            event = EngineEvent(
                event_id=self._event_seq,
                kind="inbound_message",
                participant_id=participant_id,
                payload={
                    "message_id": msg.message_id,
                    "body": msg.body,
                    "from": msg.from_address,
                    "attachments": len(msg.attachments),
                },
                occurred_at=msg.received_at,
            )
            outcome = self._process_inbound(event, msg)
            self._flush_tool_results()
            return outcome

    def submit_text(self, participant_id: str, body: str, attachments: int = 0) -> TransitionOutcome:
        """Test/simulator shortcut: inbound message without the gateway."""
        machine = self._machine(participant_id)
        msg = InboundMessage(
            message_id=f"direct-{self._event_seq + 1}",
            from_address=machine.contact_address,
            body=body,
            received_at=self.clock.now(),
            attachments=tuple(
                Attachment("image/jpeg", 0, "") for _ in range(attachments)
            ),
        )
        return self.submit_inbound(participant_id, msg)

    def manual_transition(
        self, participant_id: str, target_state: str, actor_id: str, reason: str
    ) -> TransitionOutcome:
        """Researcher override: set the state directly, loudly audited. Entry
        actions of the target state run; exit actions of the abandoned state
        do not."""
        with self._lock:
            machine = self._machine(participant_id)
            study = self.studies[machine.study_id]
            compiled = study.compiled
            if not compiled.has_state(target_state):
                raise UnknownStateError(target_state)
            now = self.clock.now()
            from_state = machine.current_state
            self._disarm_state_timers(machine, from_state)
            machine.current_state = target_state
            machine.state_entered_at = now
            state = compiled.states[target_state]
            if state.terminal:
                machine.status = COMPLETED
                self.timers.cancel_participant(participant_id)
            elif machine.status == COMPLETED:
                machine.status = ACTIVE
            self.audit.append(
                audit_kinds.MANUAL, participant_id, now,
                {
                    "action": "transition",
                    "from": from_state,
                    "target": target_state,
                    "actor": actor_id,
                    "reason": reason,
                    "context_after": dict(machine.context),
                },
            )
            self._enter_state(machine, study, state, payload={"manual": True}, now=now)
            self._flush_tool_results()
            return TransitionOutcome("applied", from_state, target_state)

    def tick(self, now: datetime | None = None) -> list[TransitionOutcome]:
        """Advance time: fire due timers through the dispatch table, then pump
        the outbound queue."""
        with self._lock:
            now = as_utc(now) if now else self.clock.now()
            outcomes = []
            for timed in self.timers.tick(now):
                self._event_seq += 1
                event = EngineEvent(
                    event_id=self._event_seq,
                    kind="timer_fired",
                    participant_id=timed.participant_id,
                    payload={"timer_id": timed.timer_id, "due_at": iso(timed.due_at),
                             **timed.payload},
                    occurred_at=now,
                )
                outcomes.append(self.dispatch(event))
            self._flush_tool_results()
            self.gateway.pump(now)
            return outcomes

    def _flush_tool_results(self) -> None:
        while self._pending_tool_results:
            event = self._pending_tool_results.pop(0)
            self.dispatch(event)

    # ------------------------------------------------------------------
    # dispatch

    def _process_inbound(self, event: EngineEvent, msg: InboundMessage) -> TransitionOutcome:
        machine = self._machine(event.participant_id)
        study = self.studies[machine.study_id]
        study.metrics.total_incoming += 1
        detail = dict(event.payload)
        session = self.conversations.open_session_for(event.participant_id)
        if session is not None and machine.status == ACTIVE:
            outcome = self.conversations.handle_answer(
                session, msg.body, now=event.occurred_at, tz_name=machine.timezone
            )
            detail["session_id"] = session.session_id
            detail["session_outcome"] = type(outcome).__name__.lower() if outcome else "ignored"
            if detail["session_outcome"] == "escalate":
                study.metrics.escalations += 1
            self.audit.append(audit_kinds.MESSAGE_IN, event.participant_id,
                              event.occurred_at, detail)
            return TransitionOutcome("applied" if outcome else "rejected",
                                     machine.current_state, machine.current_state,
                                     reason="conversation answer")
        self.audit.append(audit_kinds.MESSAGE_IN, event.participant_id,
                          event.occurred_at, detail)
        classified = study.pack.classify(msg, machine.timezone)
        if isinstance(classified, RejectedMessage):
            study.metrics.unrecognized += 1
            self.audit.append(
                audit_kinds.REJECTION, event.participant_id, event.occurred_at,
                {"category": "unrecognized", "reason": classified.reason,
                 "message_id": msg.message_id},
            )
            if classified.response and machine.status == ACTIVE:
                self._send_text(machine, classified.response)
            return TransitionOutcome(
                "rejected", machine.current_state, None, reason=classified.reason
            )
        trigger_key = ("message", classified.keyword)
        payload = dict(classified.payload)
        payload["body"] = msg.body
        payload["occurred_at"] = iso(event.occurred_at)
        return self._dispatch_trigger(event, machine, study, trigger_key, payload)

    def dispatch(self, event: EngineEvent) -> TransitionOutcome:
        """Route one engine event against the participant's transition table."""
        machine = self._machine(event.participant_id)
        study = self.studies[machine.study_id]
        if event.kind == "timer_fired":
            trigger_key = ("timer", event.payload["timer_id"])
            payload = dict(event.payload)
            payload["occurred_at"] = iso(event.occurred_at)
            return self._dispatch_trigger(event, machine, study, trigger_key, payload)
        if event.kind == "tool_result":
            return self._dispatch_tool_result(event, machine, study)
        if event.kind == "inbound_message":
            raise ValueError("inbound messages enter via submit_inbound")
        if event.kind == "manual_transition":
            return self.manual_transition(
                event.participant_id, event.payload["target_state"],
                event.payload.get("actor", "unknown"), event.payload.get("reason", ""),
            )
        raise ValueError(f"unknown event kind {event.kind!r}")

    def _dispatch_tool_result(
        self, event: EngineEvent, machine: ParticipantMachine, study: Study
    ) -> TransitionOutcome:
        payload = dict(event.payload)
        session_id = payload.get("session_id", "")
        if payload.get("outcome") == "adequate":
            if session_id in self._consumed_sessions:
                self.audit.append(
                    audit_kinds.REJECTION, event.participant_id, event.occurred_at,
                    {"category": "duplicate_tool_result", "reason":
                        f"session {session_id} already applied", "session_id": session_id},
                )
                return TransitionOutcome("rejected", machine.current_state,
                                         reason="duplicate tool result")
            self._consumed_sessions.add(session_id)
            for key, value in payload.get("values", {}).items():
                machine.context[f"{payload['tool']}.{key}"] = value
        trigger_key = ("tool", payload.get("tool", ""), payload.get("outcome", ""))
        payload["occurred_at"] = iso(event.occurred_at)
        return self._dispatch_trigger(event, machine, study, trigger_key, payload)

    def _dispatch_trigger(
        self,
        event: EngineEvent,
        machine: ParticipantMachine,
        study: Study,
        trigger_key: tuple,
        payload: dict,
    ) -> TransitionOutcome:
        if machine.status == WITHDRAWN:
            self.audit.append(
                audit_kinds.REJECTION, machine.participant_id, event.occurred_at,
                {"category": "withdrawn", "reason": "participant withdrawn",
                 "event_kind": event.kind},
            )
            return TransitionOutcome("rejected", machine.current_state,
                                     reason="participant withdrawn")
        payload.setdefault("tz", machine.timezone)
        compiled = study.compiled
        candidates = compiled.lookup(machine.current_state, trigger_key)
        for transition in candidates:
            if transition.guard is not None:
                guard = study.pack.guards.get(transition.guard)
                if guard is None:
                    self.audit.append(
                        audit_kinds.REJECTION, machine.participant_id, event.occurred_at,
                        {"category": "unknown_guard", "reason":
                            f"guard {transition.guard!r} not registered"},
                    )
                    return TransitionOutcome("rejected", machine.current_state,
                                             reason=f"unknown guard {transition.guard}")
                try:
                    satisfied = guard(machine.context, payload)
                except Exception as exc:
                    logger.exception("guard %s raised", transition.guard)
                    self.audit.append(
                        audit_kinds.REJECTION, machine.participant_id, event.occurred_at,
                        {"category": "guard_error", "reason":
                            f"guard {transition.guard!r} raised {exc!r}"},
                    )
                    return TransitionOutcome("rejected", machine.current_state,
                                             reason=f"guard {transition.guard} failed")
                if not satisfied:
                    continue
            return self._apply_transition(machine, study, transition, payload,
                                          event.occurred_at)
        self.audit.append(
            audit_kinds.REJECTION, machine.participant_id, event.occurred_at,
            {"category": "no_match", "reason":
                f"no transition from {machine.current_state!r} on {trigger_key!r}",
             "event_kind": event.kind, "trigger_key": list(trigger_key)},
        )
        return TransitionOutcome("no_match", machine.current_state)

    def _apply_transition(
        self,
        machine: ParticipantMachine,
        study: Study,
        transition: CompiledTransition,
        payload: dict,
        now: datetime,
    ) -> TransitionOutcome:
        compiled = study.compiled
        from_state = machine.current_state
        extras: dict = {}
        if transition.internal:
            self._run_actions(machine, study, transition.actions, payload, now, extras)
        else:
            source = compiled.states[from_state]
            self._disarm_state_timers(machine, from_state)
            self._run_actions(machine, study, source.exit_actions, payload, now, extras)
            self._run_actions(machine, study, transition.actions, payload, now, extras)
            machine.current_state = transition.target
            machine.state_entered_at = now
        detail = {
            "event": "dispatch",
            "from": from_state,
            "to": transition.target,
            "trigger": transition.trigger.label(),
            "transition_index": transition.index,
            "internal": transition.internal,
            "protocol_version": compiled.version_hash,
        }
        target = compiled.states[transition.target]
        if not transition.internal:
            if target.terminal:
                machine.status = COMPLETED
                self.timers.cancel_participant(machine.participant_id)
            self._enter_state(machine, study, target, payload, now, extras)
        detail["context_after"] = dict(machine.context)
        detail.update(extras)
        self.audit.append(audit_kinds.TRANSITION, machine.participant_id, now, detail)
        return TransitionOutcome(
            "applied", from_state, transition.target,
            actions_emitted=transition.actions, transition=transition,
        )

    # ------------------------------------------------------------------
    # state entry/exit and actions

    def _enter_state(self, machine, study, state, payload, now, extras=None) -> None:
        if machine.status == ACTIVE or machine.status == COMPLETED:
            self._run_actions(machine, study, state.entry_actions, payload, now,
                              extras if extras is not None else {})
        if machine.status == ACTIVE and not state.terminal:
            self._arm_state_timers(machine, study, state.name, now)

    def _arm_state_timers(self, machine, study, state_name: str, now: datetime) -> None:
        for transition in study.compiled.state_timers.get(state_name, []):
            trigger = transition.trigger
            assert isinstance(trigger, TimerTrigger)
            if trigger.reference == "entry":
                due = now + timedelta(seconds=trigger.seconds)
                recurrence = None
            else:
                due = next_daily_occurrence(now, trigger.hh, trigger.mm, machine.timezone)
                recurrence = DailyAt(trigger.hh, trigger.mm, machine.timezone)
            self.timers.schedule_at(
                machine.participant_id, transition.timer_id, due,
                recurrence=recurrence, payload={"auto": True},
            )

    def _disarm_state_timers(self, machine, state_name: str) -> None:
        self.timers.cancel_participant(machine.participant_id, prefix=f"@{state_name}/")

    def _run_actions(self, machine, study, actions, payload, now, extras) -> None:
        for action in actions:
            if action.kind == "send_message":
                self._send_template(machine, study, action.arg("template"), payload)
            elif action.kind == "schedule":
                event, replaced = self.timers.schedule_at(
                    machine.participant_id, action.arg("timer"),
                    now + timedelta(seconds=int(action.arg("seconds"))),
                )
                if replaced:
                    self.audit.append(
                        audit_kinds.NOTIFICATION, machine.participant_id, now,
                        {"reason": f"timer {action.arg('timer')} replaced",
                         "category": "timer_replaced"},
                    )
            elif action.kind == "cancel":
                self.timers.cancel(machine.participant_id, action.arg("timer"))
            elif action.kind == "record_metric":
                name = action.arg("name")
                study.metrics.bump(name)
                effect = study.pack.effects.get(name)
                if effect is not None:
                    effect(EffectContext(engine=self, machine=machine, study=study,
                                         payload=payload, now=now, extras=extras))
            elif action.kind == "notify_staff":
                self._notify_staff(study, machine.participant_id, action.arg("reason"),
                                   "protocol")
            else:  # pragma: no cover - parser prevents unknown kinds
                raise ValueError(f"unknown action kind {action.kind!r}")

    def _render_template(self, machine, study, template_id: str, payload: dict) -> str:
        text = study.pack.templates.get(template_id)
        if text is None:
            raise KeyError(f"unknown template {template_id!r}")
        values = {"participant_id": machine.participant_id, "state": machine.current_state}
        values.update({k: v for k, v in machine.context.items()})
        values.update({k: v for k, v in payload.items() if isinstance(v, (str, int, float))})
        try:
            return text.format(**values)
        except (KeyError, IndexError):
            return text

    def _send_template(self, machine, study, template_id: str, payload: dict) -> None:
        self._send_text(machine, self._render_template(machine, study, template_id, payload))

    def _send_text(self, machine: ParticipantMachine, text: str) -> None:
        msg = self.gateway.send(machine.contact_address, text)
        self.audit.append(
            audit_kinds.MESSAGE_OUT, machine.participant_id, self.clock.now(),
            {"message_id": msg.message_id, "body": text, "to": machine.contact_address,
             "channel": "participant"},
        )

    def _send_staff(self, study: Study, text: str) -> None:
        for address in study.staff_addresses:
            msg = self.gateway.send(address, text)
            self.audit.append(
                audit_kinds.MESSAGE_OUT, None, self.clock.now(),
                {"message_id": msg.message_id, "body": text, "to": address,
                 "channel": "staff"},
            )

    def _notify_staff(self, study: Study | None, participant_id: str | None,
                      reason: str, category: str) -> None:
        self.audit.append(
            audit_kinds.NOTIFICATION, participant_id, self.clock.now(),
            {"reason": reason, "category": category},
        )
        if study is not None:
            self._send_staff(study, f"[{category}] {reason}")

    # ------------------------------------------------------------------
    # queries

    def audit_trail(
        self,
        participant_id: str,
        since_seq: int | None = None,
        until_seq: int | None = None,
        since_ts: datetime | None = None,
        until_ts: datetime | None = None,
    ) -> list[AuditRecord]:
        with self._lock:
            self._machine(participant_id)
            return self.audit.records(
                participant_id=participant_id,
                since_seq=since_seq, until_seq=until_seq,
                since_ts=since_ts, until_ts=until_ts,
            )

    def replay_participant(self, participant_id: str) -> str | None:
        machine = self._machine(participant_id)
        study = self.studies[machine.study_id]
        return replay(self.audit_trail(participant_id), study.compiled)

    def enrolled_days(self, machine: ParticipantMachine, now: datetime | None = None) -> int:
        now = as_utc(now) if now else self.clock.now()
        tz = ZoneInfo(machine.timezone)
        days = (now.astimezone(tz).date() - machine.registered_at.astimezone(tz).date()).days + 1
        return max(days, 1)

    def study_metrics(self, study_id: str, now: datetime | None = None) -> AdherenceMetrics:
        with self._lock:
            study = self.studies.get(study_id)
            if study is None:
                raise UnknownStudyError(study_id)
            days = sum(
                self.enrolled_days(m, now)
                for m in self.machines.values()
                if m.study_id == study_id
            )
            return AdherenceMetrics(
                successful_fasts=sum(1 for f in study.metrics.fasts if f.success),
                days_enrolled=days,
                unrecognized_messages=study.metrics.unrecognized,
                total_incoming=study.metrics.total_incoming,
            )

    def record_fast(self, study: Study, fast: FastRecord) -> None:
        study.metrics.fasts.append(fast)
