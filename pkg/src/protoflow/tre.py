"""Time-restricted-eating message grammar, fast evaluation, and adherence
metrics.

The grammar is total: every input maps to StartCal, EndCal, or Unrecognized.
A time token must carry am/pm to be accepted; a bare keyword falls back to
the message timestamp. Unrecognized results carry the canonical response
text sent back to the participant.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from zoneinfo import ZoneInfo

from .clock import as_utc
from .scheduler import _resolve_local

STARTCAL_NOT_UNDERSTOOD = (
    "Your STARTCAL time was not understood. Please send 'STARTCAL' again "
    "with your starting time, including 'am' or 'pm.'"
)
ENDCAL_NOT_UNDERSTOOD = (
    "Your ENDCAL time was not understood. Please send 'ENDCAL' again "
    "with your ending time, including 'am' or 'pm.'"
)
MESSAGE_NOT_UNDERSTOOD = (
    "Your message was not understood. Please send 'STARTCAL' or 'ENDCAL' "
    "with your time, including 'am' or 'pm.'"
)

SUCCESS_WINDOW_HOURS = (9, 11)

_TIME_RE = re.compile(
    r"""^\s*
        (?: (?P<h>\d{1,2}) (?:[:.](?P<m>\d{2}))?   # 7, 7:15, 7.15
          | (?P<hm>\d{3,4})                        # 715, 1030
        )
        \s* (?P<ap>[ap]) \.? \s* m \.? \s*$
    """,
    re.IGNORECASE | re.VERBOSE,
)


@dataclass(frozen=True)
class StartCal:
    local_time: time


@dataclass(frozen=True)
class EndCal:
    local_time: time


@dataclass(frozen=True)
class Unrecognized:
    reason: str
    response: str


TreParse = StartCal | EndCal | Unrecognized


def _parse_time_token(text: str) -> time | None:
    match = _TIME_RE.match(text)
    if not match:
        return None
    if match.group("hm") is not None:
        digits = match.group("hm")
        hour, minute = int(digits[:-2]), int(digits[-2:])
    else:
        hour = int(match.group("h"))
        minute = int(match.group("m") or 0)
    if not (1 <= hour <= 12) or minute > 59:
        return None
    hour %= 12
    if match.group("ap").lower() == "p":
        hour += 12
    return time(hour, minute)


def parse_tre_message(body: str, received_at: datetime, tz_name: str = "UTC") -> TreParse:
    """Classify one inbound TRE message. Never raises; ambiguity and noise
    come back as Unrecognized with the canonical response text."""
    stripped = body.strip()
    lowered = stripped.lower()
    if lowered.startswith("startcal"):
        keyword, remainder = "startcal", stripped[len("startcal"):]
        canonical = STARTCAL_NOT_UNDERSTOOD
    elif lowered.startswith("endcal"):
        keyword, remainder = "endcal", stripped[len("endcal"):]
        canonical = ENDCAL_NOT_UNDERSTOOD
    else:
        return Unrecognized("no startcal/endcal keyword", MESSAGE_NOT_UNDERSTOOD)
    if remainder.strip() == "":
        local = as_utc(received_at).astimezone(ZoneInfo(tz_name))
        stated = time(local.hour, local.minute)
    else:
        parsed = _parse_time_token(remainder)
        if parsed is None:
            return Unrecognized(f"ambiguous or missing am/pm time after {keyword}", canonical)
        stated = parsed
    return StartCal(stated) if keyword == "startcal" else EndCal(stated)


def anchor_stated_time(stated: time, received_at: datetime, tz_name: str) -> datetime:
    """UTC instant for a stated local time, anchored to the calendar day of
    receipt. A stated time more than 12h in the future is treated as late
    reporting of the previous day."""
    received_at = as_utc(received_at)
    tz = ZoneInfo(tz_name)
    local_day = received_at.astimezone(tz).date()
    candidate = _resolve_local(datetime.combine(local_day, stated), tz)
    if candidate > received_at + timedelta(hours=12):
        candidate = _resolve_local(datetime.combine(local_day - timedelta(days=1), stated), tz)
    return candidate


@dataclass(frozen=True)
class FastRecord:
    participant_id: str
    date: date  # local calendar day the eating window started
    start_at: datetime
    end_at: datetime
    duration_hours: float
    success: bool

    def to_doc(self) -> dict:
        from .clock import iso

        return {
            "participant_id": self.participant_id,
            "date": self.date.isoformat(),
            "start_at": iso(self.start_at),
            "end_at": iso(self.end_at),
            "duration_hours": self.duration_hours,
            "success": self.success,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FastRecord":
        from .clock import parse_iso

        return cls(
            participant_id=doc["participant_id"],
            date=date.fromisoformat(doc["date"]),
            start_at=parse_iso(doc["start_at"]),
            end_at=parse_iso(doc["end_at"]),
            duration_hours=doc["duration_hours"],
            success=doc["success"],
        )


def evaluate_fast(
    start_at: datetime,
    end_at: datetime,
    participant_id: str = "",
    tz_name: str = "UTC",
) -> FastRecord:
    """Score one eating window: success iff the duration lies in the
    9-to-11-hour window, boundaries included."""
    start_at, end_at = as_utc(start_at), as_utc(end_at)
    if end_at <= start_at:
        raise ValueError("eating window must end after it starts")
    duration_s = (end_at - start_at).total_seconds()
    low, high = SUCCESS_WINDOW_HOURS
    success = low * 3600 <= duration_s <= high * 3600
    local_day = start_at.astimezone(ZoneInfo(tz_name)).date()
    return FastRecord(
        participant_id=participant_id,
        date=local_day,
        start_at=start_at,
        end_at=end_at,
        duration_hours=duration_s / 3600.0,
        success=success,
    )


def success_rate(fasts: list[FastRecord], days_enrolled: int) -> float:
    """Successful fasts divided by days enrolled; unrecorded days count in
    the denominator only."""
    if days_enrolled < 1:
        raise ValueError("days_enrolled must be at least 1")
    return sum(1 for f in fasts if f.success) / days_enrolled


def error_rate(unrecognized: int, total_incoming: int) -> float:
    if total_incoming < 1:
        raise ValueError("total_incoming must be at least 1")
    return unrecognized / total_incoming


def format_hours(hours: float) -> str:
    total_minutes = round(hours * 60)
    h, m = divmod(total_minutes, 60)
    return f"{h}h" if m == 0 else f"{h}h{m:02d}m"


def feedback_message(fast: FastRecord) -> str:
    """Encouraging text on success; informative text naming the duration and
    the 9-11 hour target otherwise."""
    duration = format_hours(fast.duration_hours)
    low, high = SUCCESS_WINDOW_HOURS
    if fast.success:
        return (
            f"Great job! Your eating window was {duration}, right inside the "
            f"{low}-{high} hour target. Keep it up!"
        )
    if fast.duration_hours > high:
        return (
            f"Your eating window was {duration}, which is longer than the {high} hour "
            f"maximum. Aim for a {low}-{high} hour window tomorrow."
        )
    return (
        f"Your eating window was {duration}, which is shorter than the {low} hour "
        f"minimum. Aim for a {low}-{high} hour window tomorrow."
    )


@dataclass(frozen=True)
class AdherenceMetrics:
    successful_fasts: int
    days_enrolled: int
    unrecognized_messages: int
    total_incoming: int

    @property
    def success_rate(self) -> float:
        if self.days_enrolled == 0:
            return 1.0  # display convention: everyone starts at 100%
        return self.successful_fasts / self.days_enrolled

    @property
    def error_rate(self) -> float:
        if self.total_incoming == 0:
            return 0.0
        return self.unrecognized_messages / self.total_incoming

    def to_doc(self) -> dict:
        return {
            "successful_fasts": self.successful_fasts,
            "days_enrolled": self.days_enrolled,
            "success_rate": self.success_rate,
            "unrecognized_messages": self.unrecognized_messages,
            "total_incoming": self.total_incoming,
            "error_rate": self.error_rate,
        }
