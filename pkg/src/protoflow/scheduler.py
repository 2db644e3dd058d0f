"""Deterministic timed-event scheduling over an injectable clock.

Events fire on tick() in (due_at, enqueue_seq) order, so identical schedule
calls plus an identical tick sequence always produce an identical firing
sequence. Daily recurrences are computed in the participant's IANA timezone;
an occurrence erased by a spring-forward gap fires at the first valid instant
after the gap.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta, timezone
from zoneinfo import ZoneInfo

from .clock import ClockRegressionError, as_utc, iso, parse_iso


@dataclass(frozen=True)
class DailyAt:
    hh: int
    mm: int
    tz: str

    def label(self) -> str:
        return f"daily_at({self.hh:02d}:{self.mm:02d}, {self.tz})"


@dataclass(frozen=True)
class TimedEvent:
    timer_id: str
    participant_id: str
    due_at: datetime
    enqueue_seq: int
    payload: dict = field(default_factory=dict, hash=False)
    recurrence: DailyAt | None = None

    def ordering_key(self) -> tuple[datetime, int]:
        return (self.due_at, self.enqueue_seq)


def _local_exists(naive: datetime, tz: ZoneInfo) -> bool:
    candidate = naive.replace(tzinfo=tz)
    roundtrip = candidate.astimezone(timezone.utc).astimezone(tz)
    return roundtrip.replace(tzinfo=None) == naive


def _resolve_local(naive: datetime, tz: ZoneInfo) -> datetime:
    """UTC instant for a naive local time. Nonexistent times (spring-forward
    gap) resolve to the first valid instant after the gap; ambiguous times
    (fall-back) resolve to the first occurrence."""
    if _local_exists(naive, tz):
        return naive.replace(tzinfo=tz, fold=0).astimezone(timezone.utc)
    # Walk forward from the pre-gap mapping one minute at a time until the
    # local clock has caught up with the requested wall time.
    probe = naive.replace(tzinfo=tz, fold=1).astimezone(timezone.utc)
    for _ in range(26 * 60):
        local = probe.astimezone(tz).replace(tzinfo=None)
        if local >= naive:
            return probe
        probe += timedelta(minutes=1)
    raise ValueError(f"could not resolve local time {naive} in {tz}")


def next_daily_occurrence(after: datetime, hh: int, mm: int, tz_name: str) -> datetime:
    """First UTC instant strictly after ``after`` at which the local wall clock
    in ``tz_name`` reads HH:MM."""
    after = as_utc(after)
    tz = ZoneInfo(tz_name)
    local_day = after.astimezone(tz).date()
    for offset in range(0, 3):
        naive = datetime.combine(local_day + timedelta(days=offset), time(hh, mm))
        instant = _resolve_local(naive, tz)
        if instant > after:
            return instant
    raise ValueError(f"no next occurrence of {hh:02d}:{mm:02d} after {iso(after)}")


class TimerService:
    """Priority queue of timed events with replace-on-duplicate semantics.

    One active timer per (participant_id, timer_id); scheduling over an
    existing key replaces it. Cancellation is lazy: superseded heap entries
    are dropped when popped.
    """

    def __init__(self):
        self._heap: list[tuple[datetime, int, TimedEvent]] = []
        self._active: dict[tuple[str, str], int] = {}
        self._seq = 0
        self._last_tick: datetime | None = None

    def __len__(self) -> int:
        return len(self._active)

    def schedule_at(
        self,
        participant_id: str,
        timer_id: str,
        due_at: datetime,
        recurrence: DailyAt | None = None,
        payload: dict | None = None,
    ) -> tuple[TimedEvent, bool]:
        """Queue an event. Returns (event, replaced). A due_at in the past is
        kept as-is and fires on the next tick."""
        due_at = as_utc(due_at)
        key = (participant_id, timer_id)
        replaced = key in self._active
        self._seq += 1
        event = TimedEvent(
            timer_id=timer_id,
            participant_id=participant_id,
            due_at=due_at,
            enqueue_seq=self._seq,
            payload=dict(payload or {}),
            recurrence=recurrence,
        )
        self._active[key] = self._seq
        heapq.heappush(self._heap, (due_at, self._seq, event))
        return event, replaced

    def cancel(self, participant_id: str, timer_id: str) -> bool:
        return self._active.pop((participant_id, timer_id), None) is not None

    def cancel_participant(self, participant_id: str, prefix: str | None = None) -> int:
        """Cancel all (or all prefix-matching) timers of one participant."""
        keys = [
            k for k in self._active
            if k[0] == participant_id and (prefix is None or k[1].startswith(prefix))
        ]
        for k in keys:
            del self._active[k]
        return len(keys)

    def active_timers(self) -> list[TimedEvent]:
        """Live events in (due_at, enqueue_seq) order."""
        live = [
            ev
            for _, seq, ev in self._heap
            if self._active.get((ev.participant_id, ev.timer_id)) == seq
        ]
        return sorted(live, key=TimedEvent.ordering_key)

    def next_due(self) -> datetime | None:
        self._compact()
        return self._heap[0][0] if self._heap else None

    def _compact(self) -> None:
        while self._heap:
            _, seq, ev = self._heap[0]
            if self._active.get((ev.participant_id, ev.timer_id)) == seq:
                return
            heapq.heappop(self._heap)

    def tick(self, now: datetime) -> list[TimedEvent]:
        """Fire everything due at or before ``now``, re-enqueueing recurrences
        at their next future occurrence. Rejects clock regression."""
        now = as_utc(now)
        if self._last_tick is not None and now < self._last_tick:
            raise ClockRegressionError(
                f"tick at {iso(now)} precedes previous tick {iso(self._last_tick)}"
            )
        self._last_tick = now
        fired: list[TimedEvent] = []
        while True:
            self._compact()
            if not self._heap or self._heap[0][0] > now:
                break
            _, seq, event = heapq.heappop(self._heap)
            del self._active[(event.participant_id, event.timer_id)]
            fired.append(event)
            if event.recurrence is not None:
                rec = event.recurrence
                nxt = next_daily_occurrence(max(now, event.due_at), rec.hh, rec.mm, rec.tz)
                self.schedule_at(
                    event.participant_id, event.timer_id, nxt,
                    recurrence=rec, payload=event.payload,
                )
        return fired

    # -- snapshot support

    def snapshot_state(self) -> dict:
        return {
            "seq": self._seq,
            "last_tick": iso(self._last_tick) if self._last_tick else None,
            "timers": [
                {
                    "timer_id": ev.timer_id,
                    "participant_id": ev.participant_id,
                    "due_at": iso(ev.due_at),
                    "enqueue_seq": ev.enqueue_seq,
                    "payload": ev.payload,
                    "recurrence": (
                        {"hh": ev.recurrence.hh, "mm": ev.recurrence.mm, "tz": ev.recurrence.tz}
                        if ev.recurrence
                        else None
                    ),
                }
                for ev in self.active_timers()
            ],
        }

    @classmethod
    def restore_state(cls, state: dict) -> "TimerService":
        service = cls()
        for item in state["timers"]:
            rec = item.get("recurrence")
            event = TimedEvent(
                timer_id=item["timer_id"],
                participant_id=item["participant_id"],
                due_at=parse_iso(item["due_at"]),
                enqueue_seq=item["enqueue_seq"],
                payload=dict(item.get("payload", {})),
                recurrence=DailyAt(rec["hh"], rec["mm"], rec["tz"]) if rec else None,
            )
            key = (event.participant_id, event.timer_id)
            service._active[key] = event.enqueue_seq
            heapq.heappush(service._heap, (event.due_at, event.enqueue_seq, event))
        service._seq = state["seq"]
        last = state.get("last_tick")
        service._last_tick = parse_iso(last) if last else None
        return service
