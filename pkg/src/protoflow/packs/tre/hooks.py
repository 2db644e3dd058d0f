"""Host extension for the TRE pack: message classification, the
no-startcal-today guard, and the fast bookkeeping effects."""
from __future__ import annotations

from zoneinfo import ZoneInfo

from protoflow.clock import iso, parse_iso
from protoflow.packs import ClassifiedMessage, RejectedMessage
from protoflow.tre import (
    StartCal,
    Unrecognized,
    anchor_stated_time,
    evaluate_fast,
    feedback_message,
    parse_tre_message,
)

INVERTED_WINDOW_NOTICE = (
    "Your ENDCAL time is earlier than your STARTCAL time, so this eating window "
    "could not be recorded. Please send 'ENDCAL' again with the correct time."
)


def classify(msg, tz_name: str):
    parsed = parse_tre_message(msg.body, msg.received_at, tz_name)
    if isinstance(parsed, Unrecognized):
        return RejectedMessage(parsed.reason, parsed.response)
    anchored = anchor_stated_time(parsed.local_time, msg.received_at, tz_name)
    keyword = "startcal" if isinstance(parsed, StartCal) else "endcal"
    return ClassifiedMessage(
        keyword,
        {"stated": parsed.local_time.strftime("%H:%M"), "anchored_at": iso(anchored)},
    )


def _local_day(instant_iso: str, tz_name: str) -> str:
    return parse_iso(instant_iso).astimezone(ZoneInfo(tz_name)).date().isoformat()


def no_startcal_today(context: dict, payload: dict) -> bool:
    today = _local_day(payload["occurred_at"], payload.get("tz", "UTC"))
    return context.get("last_start_day") != today


def fast_started(ctx) -> None:
    anchored = ctx.payload.get("anchored_at") or ctx.payload["occurred_at"]
    ctx.set("fast_start_at", anchored)
    ctx.set("last_start_day", _local_day(anchored, ctx.tz))


def fast_ended(ctx) -> None:
    start = ctx.pop("fast_start_at", None)
    if start is None:
        return
    end = ctx.payload.get("anchored_at") or ctx.payload["occurred_at"]
    start_at, end_at = parse_iso(start), parse_iso(end)
    if end_at <= start_at:
        ctx.send(INVERTED_WINDOW_NOTICE)
        return
    fast = evaluate_fast(start_at, end_at, ctx.machine.participant_id, ctx.tz)
    ctx.record_fast(fast)
    ctx.send(feedback_message(fast))


GUARDS = {"no_startcal_today": no_startcal_today}
EFFECTS = {"fast_started": fast_started, "fast_ended": fast_ended}
