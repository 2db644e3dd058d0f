"""Deterministic desk-scale cohort simulation over a virtual clock, plus a
wall-clock load test and audit-log replay.

A scenario compresses weeks of a study into seconds: participant behavior is
generated up front from the seed, events are fed through the full stack
(gateway -> engine -> packs -> scheduler), and the report carries both the
live metrics and an independent recount from the audit log.
"""
from __future__ import annotations

import json
import threading
import time as time_mod
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from pathlib import Path
from random import Random
from zoneinfo import ZoneInfo

from . import audit as audit_kinds
from .audit import AuditLog, AuditRecord, SegmentWriter, read_segments
from .clock import VirtualClock, as_utc, iso, parse_iso
from .engine import Engine
from .gateway import DEFAULT_IN_LIMIT, NumberPool, arrival_rate_ok
from .packs import load_shipped_pack
from .persistence import SnapshotManager, SnapshotPolicy, replay_audit_tail, restore_engine
from .tre import parse_tre_message, Unrecognized

BEHAVIORS = ("compliant", "short", "long", "ambiguous", "silent")

AMBIGUOUS_BODIES = (
    "startcal7",
    "startcal 7",
    "endcal around sunset",
    "stratcal 8am",
    "what time should I eat?",
)


class ScenarioConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    cohort_size: int = 20
    duration_days: int = 7
    compliant: float = 0.92
    short: float = 0.04
    long: float = 0.04
    ambiguous: float = 0.0
    silent: float = 0.0
    timezone: str = "UTC"
    start: str = "2026-03-02T00:00:00Z"
    pool_size: int = 3

    def validate(self) -> None:
        fractions = (self.compliant, self.short, self.long, self.ambiguous, self.silent)
        if any(f < 0 for f in fractions):
            raise ScenarioConfigError("behavior fractions must be non-negative")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ScenarioConfigError(f"behavior fractions sum to {sum(fractions)}, not 1")
        if self.cohort_size < 0 or self.duration_days < 1:
            raise ScenarioConfigError("cohort_size must be >= 0 and duration_days >= 1")

    def to_doc(self) -> dict:
        return {
            "seed": self.seed,
            "cohort_size": self.cohort_size,
            "duration_days": self.duration_days,
            "mix": {
                "compliant": self.compliant,
                "short": self.short,
                "long": self.long,
                "ambiguous": self.ambiguous,
                "silent": self.silent,
            },
            "timezone": self.timezone,
            "start": self.start,
            "pool_size": self.pool_size,
        }

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        mix = doc.pop("mix", {})
        return cls(**{**doc, **mix})


@dataclass(frozen=True)
class SimMessage:
    at: datetime
    participant_id: str
    address: str
    body: str
    index: int


def assign_behaviors(config: ScenarioConfig) -> list[str]:
    """Deterministic behavior assignment by largest-remainder apportionment."""
    fractions = [config.compliant, config.short, config.long, config.ambiguous,
                 config.silent]
    n = config.cohort_size
    exact = [f * n for f in fractions]
    counts = [int(e) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[order[i]] += 1
    assigned: list[str] = []
    for behavior, count in zip(BEHAVIORS, counts):
        assigned.extend([behavior] * count)
    return assigned


def _fmt_local(dt: datetime) -> str:
    hour = dt.hour % 12 or 12
    suffix = "am" if dt.hour < 12 else "pm"
    return f"{hour}:{dt.minute:02d}{suffix}"


def generate_timeline(config: ScenarioConfig) -> tuple[list[SimMessage], list[str]]:
    """All participant messages for the whole scenario, sorted by instant.
    Pure function of the config (seed included)."""
    rng = Random(config.seed)
    behaviors = assign_behaviors(config)
    start = parse_iso(config.start)
    tz = ZoneInfo(config.timezone)
    messages: list[SimMessage] = []
    index = 0
    for p, behavior in enumerate(behaviors):
        pid = f"p{p + 1:04d}"
        address = f"+1555{p + 1:07d}"
        for day in range(config.duration_days):
            day_base = start + timedelta(days=day)
            if behavior == "silent":
                continue
            start_minute = rng.randint(6 * 60 + 30, 9 * 60 + 30)
            if behavior == "short":
                duration = rng.randint(5 * 60, 9 * 60 - 10)
            elif behavior == "long":
                duration = rng.randint(11 * 60 + 10, 14 * 60 - 20)
            else:
                duration = rng.randint(9 * 60 + 6, 11 * 60 - 6)
            start_at = day_base + timedelta(minutes=start_minute)
            end_at = start_at + timedelta(minutes=duration)
            explicit = rng.random() < 0.4
            if explicit:
                start_body = f"STARTCAL {_fmt_local(start_at.astimezone(tz))}"
                end_body = f"endcal {_fmt_local(end_at.astimezone(tz))}"
            else:
                start_body, end_body = "startcal", "endcal"
            messages.append(SimMessage(start_at, pid, address, start_body, index))
            index += 1
            messages.append(SimMessage(end_at, pid, address, end_body, index))
            index += 1
            if behavior == "ambiguous":
                bad_at = day_base + timedelta(minutes=rng.randint(10 * 60, 18 * 60))
                body = AMBIGUOUS_BODIES[rng.randrange(len(AMBIGUOUS_BODIES))]
                messages.append(SimMessage(bad_at, pid, address, body, index))
                index += 1
    messages.sort(key=lambda m: (m.at, m.index))
    return messages, behaviors


# ---------------------------------------------------------------------------
# scenario execution


def _build_engine(config: ScenarioConfig, clock: VirtualClock,
                  audit_dir: Path | None) -> Engine:
    writer = SegmentWriter(audit_dir, fsync_every=10_000) if audit_dir else None
    pool = NumberPool(numbers=tuple(f"+1999000000{i}" for i in range(config.pool_size)))
    return Engine(clock=clock, pool=pool, audit_log=AuditLog(writer=writer))


def _register_cohort(engine: Engine, config: ScenarioConfig, behaviors: list[str]) -> None:
    pack = load_shipped_pack("tre")
    engine.create_study(
        "tre-sim", "TRE simulation", pack,
        timezone_default=config.timezone,
        staff_addresses=("+15559990000",),
    )
    for p in range(len(behaviors)):
        engine.register_participant(
            "tre-sim", f"p{p + 1:04d}", f"+1555{p + 1:07d}", timezone=config.timezone
        )


def _pump_until(engine: Engine, clock: VirtualClock, target: datetime) -> None:
    """Advance the virtual clock to ``target``, firing every timer due on the
    way at its own due instant so ordering matches a fine-grained run. Timers
    already past due (downtime catch-up) fire at the current instant."""
    while True:
        due = engine.timers.next_due()
        if due is None or due > target:
            break
        clock.set_to(max(due, clock.now()))
        engine.tick(clock.now())
    clock.set_to(max(target, clock.now()))
    engine.tick(clock.now())


def run_scenario(
    config: ScenarioConfig,
    data_dir: str | Path | None = None,
    kill_after_messages: int | None = None,
) -> dict:
    """Run a full scenario and return its metrics report.

    With ``kill_after_messages`` set, the engine is snapshotted and torn down
    after that many inbound messages, then restored (same audit segments,
    same virtual clock position) and the scenario finishes on the restored
    engine: final reports must match the uninterrupted run.
    """
    config.validate()
    data_dir = Path(data_dir) if data_dir else None
    audit_dir = data_dir / "audit" if data_dir else None
    clock = VirtualClock(parse_iso(config.start))
    engine = _build_engine(config, clock, audit_dir)
    timeline, behaviors = generate_timeline(config)
    _register_cohort(engine, config, behaviors)
    end_at = parse_iso(config.start) + timedelta(days=config.duration_days) - timedelta(minutes=1)

    processed = 0
    i = 0
    while i < len(timeline):
        msg = timeline[i]
        if msg.at > end_at:
            break
        _pump_until(engine, clock, msg.at)
        engine.gateway.receive(
            {"from": msg.address, "body": msg.body, "timestamp": msg.at}
        )
        engine.tick(msg.at)
        processed += 1
        i += 1
        if kill_after_messages is not None and processed == kill_after_messages:
            engine = _kill_and_restore(engine, config, clock, data_dir)
    _pump_until(engine, clock, end_at)
    report = build_report(engine, "tre-sim", config, end_at)
    engine.audit.close()
    return report


def _kill_and_restore(engine: Engine, config: ScenarioConfig, clock: VirtualClock,
                      data_dir: Path | None) -> Engine:
    snap_dir = (data_dir / "snapshots") if data_dir else Path(".protoflow-sim-snapshots")
    manager = SnapshotManager(snap_dir, SnapshotPolicy(retain=4))
    manager.take(engine)
    prior = engine.audit.all_records()
    engine.audit.close()
    doc, _ = manager.load_latest()
    audit_dir = data_dir / "audit" if data_dir else None
    writer = SegmentWriter(audit_dir, fsync_every=10_000) if audit_dir else None
    pool = NumberPool(numbers=tuple(f"+1999000000{i}" for i in range(config.pool_size)))
    restored = restore_engine(
        doc, {"tre": load_shipped_pack("tre")},
        clock=clock, pool=pool, audit_writer=writer, prior_records=prior,
    )
    replay_audit_tail(restored, doc, prior)
    return restored


# ---------------------------------------------------------------------------
# reporting and recounts


def build_report(engine: Engine, study_id: str, config: ScenarioConfig,
                 end_at: datetime) -> dict:
    metrics = engine.study_metrics(study_id, now=end_at)
    recount = recount_from_audit(engine.audit.all_records(), end_at)
    live = {
        "successful_fasts": metrics.successful_fasts,
        "days_enrolled": metrics.days_enrolled,
        "success_rate": metrics.success_rate,
        "unrecognized": metrics.unrecognized_messages,
        "total_incoming": metrics.total_incoming,
        "error_rate": metrics.error_rate,
        "messages_in": engine.audit.count(audit_kinds.MESSAGE_IN),
        "messages_out": engine.audit.count(audit_kinds.MESSAGE_OUT),
        "escalations": len(engine.audit.records(
            kind=audit_kinds.NOTIFICATION,
            predicate=lambda r: r.detail.get("category") in
            ("conversation_escalated", "protocol"),
        )),
    }
    matches = all(live[key] == recount[key] for key in
                  ("successful_fasts", "days_enrolled", "unrecognized",
                   "total_incoming", "messages_in", "messages_out", "escalations"))
    inbound_instants = [m.received_at for m in engine.gateway.store.inbound]
    return {
        "config": config.to_doc(),
        "ended_at": iso(end_at),
        **live,
        "inbound_rate_ok": arrival_rate_ok(
            inbound_instants, DEFAULT_IN_LIMIT * config.pool_size
        ),
        "recount": recount,
        "recount_matches": matches,
    }


def recount_from_audit(records: list[AuditRecord], end_at: datetime) -> dict:
    """Brute-force metric recount from audit records alone: the independent
    oracle for every live counter."""
    end_at = as_utc(end_at)
    registrations: dict[str, tuple[datetime, str]] = {}
    successes = 0
    unrecognized = 0
    messages_in = 0
    messages_out = 0
    escalations = 0
    for r in records:
        if r.kind == audit_kinds.TRANSITION:
            if r.detail.get("event") == "register":
                registrations[r.participant_id] = (
                    r.timestamp, r.detail.get("timezone", "UTC")
                )
            fast = r.detail.get("fast")
            if fast and fast.get("success"):
                successes += 1
        elif r.kind == audit_kinds.MESSAGE_IN:
            messages_in += 1
        elif r.kind == audit_kinds.MESSAGE_OUT:
            messages_out += 1
        elif r.kind == audit_kinds.REJECTION:
            if r.detail.get("category") == "unrecognized":
                unrecognized += 1
        elif r.kind == audit_kinds.NOTIFICATION:
            if r.detail.get("category") in ("conversation_escalated", "protocol"):
                escalations += 1
    days = 0
    for registered_at, tz_name in registrations.values():
        tz = ZoneInfo(tz_name)
        days += max(
            (end_at.astimezone(tz).date() - registered_at.astimezone(tz).date()).days + 1, 1
        )
    return {
        "successful_fasts": successes,
        "days_enrolled": days,
        "success_rate": successes / days if days else 1.0,
        "unrecognized": unrecognized,
        "total_incoming": messages_in,
        "error_rate": unrecognized / messages_in if messages_in else 0.0,
        "messages_in": messages_in,
        "messages_out": messages_out,
        "escalations": escalations,
    }


def replay_scenario(audit_dir: str | Path, end_at: datetime | str | None = None) -> dict:
    """Recompute a scenario's metrics purely from its audit segments."""
    records, truncated = read_segments(audit_dir)
    if truncated:
        raise ValueError(f"{audit_dir}: audit tail truncated; refusing partial replay")
    if not records:
        return recount_from_audit([], as_utc(datetime.now().astimezone()))
    if end_at is None:
        end_at = records[-1].timestamp
    elif isinstance(end_at, str):
        end_at = parse_iso(end_at)
    return recount_from_audit(records, end_at)


# ---------------------------------------------------------------------------
# error-rate corpus


def generate_message_corpus(total: int, planted_bad: int, seed: int = 7) -> list[str]:
    """A corpus of inbound bodies with exactly ``planted_bad`` unrecognizable
    messages, deterministically shuffled."""
    if planted_bad > total:
        raise ValueError("planted_bad cannot exceed total")
    rng = Random(seed)
    bodies: list[str] = []
    for i in range(total - planted_bad):
        if i % 2 == 0:
            hour = rng.randint(6, 9)
            bodies.append(f"startcal {hour}:{rng.randint(0, 59):02d}am")
        else:
            hour = rng.randint(4, 7)
            bodies.append(f"endcal {hour}:{rng.randint(0, 59):02d}pm")
    for i in range(planted_bad):
        bodies.append(AMBIGUOUS_BODIES[i % len(AMBIGUOUS_BODIES)])
    rng.shuffle(bodies)
    return bodies


def corpus_error_rate(bodies: list[str], tz_name: str = "UTC") -> tuple[int, float]:
    """Classify a corpus through the TRE grammar; returns (unrecognized count,
    error rate)."""
    received_at = datetime(2026, 3, 2, 12, 0, tzinfo=ZoneInfo("UTC"))
    bad = sum(
        1 for body in bodies
        if isinstance(parse_tre_message(body, received_at, tz_name), Unrecognized)
    )
    return bad, bad / len(bodies)


# ---------------------------------------------------------------------------
# load test


@dataclass
class LoadReport:
    offered_rate: float
    duration_s: float
    processed: int
    processed_per_sec: float
    p99_latency_ms: float
    max_latency_ms: float

    def to_doc(self) -> dict:
        return {
            "offered_rate": self.offered_rate,
            "duration_s": self.duration_s,
            "processed": self.processed,
            "processed_per_sec": self.processed_per_sec,
            "p99_latency_ms": self.p99_latency_ms,
            "max_latency_ms": self.max_latency_ms,
        }


def load_test(messages_per_second: float, duration_s: float, producers: int = 4,
              cohort: int = 50) -> LoadReport:
    """Wall-clock throughput test: concurrent producers push TRE messages
    through the serialized engine at the offered rate; reports sustained
    processed msgs/sec and p99 enqueue-to-outcome latency.

    Pacing is cumulative (a lagging producer catches up), so the sustained
    rate only drops below the offered rate when the engine itself cannot
    keep pace.
    """
    engine = Engine(pool=NumberPool(numbers=("+19990000001", "+19990000002",
                                             "+19990000003")))
    engine.create_study("load", "load test", load_shipped_pack("tre"))
    for p in range(cohort):
        engine.register_participant("load", f"lp{p:04d}", f"+1777{p:07d}")

    total = int(messages_per_second * duration_s)
    counts = [total // producers] * producers
    counts[0] += total - sum(counts)
    interval = producers / messages_per_second
    start = time_mod.monotonic() + 0.05
    latencies: list[float] = []
    latency_lock = threading.Lock()
    finish_times = [0.0] * producers

    def produce(worker: int) -> None:
        rng = Random(worker)
        bodies = ("startcal", "endcal")
        offset = worker / messages_per_second
        local: list[float] = []
        for k in range(counts[worker]):
            target = start + offset + k * interval
            while True:
                now = time_mod.monotonic()
                if now >= target:
                    break
                time_mod.sleep(min(target - now, 0.002))
            pid = f"lp{rng.randrange(cohort):04d}"
            t0 = time_mod.perf_counter()
            engine.submit_text(pid, bodies[k % 2])
            local.append((time_mod.perf_counter() - t0) * 1000.0)
        finish_times[worker] = time_mod.monotonic()
        with latency_lock:
            latencies.extend(local)

    threads = [threading.Thread(target=produce, args=(w,)) for w in range(producers)]
    for t in threads:
        t.start()
    deadline = start + duration_s + 30.0
    while any(t.is_alive() for t in threads) and time_mod.monotonic() < deadline:
        engine.tick()
        time_mod.sleep(0.05)
    for t in threads:
        t.join(timeout=30)
    elapsed = max(finish_times) - start
    processed = len(latencies)
    ordered = sorted(latencies) or [0.0]
    p99 = ordered[min(len(ordered) - 1, int(len(ordered) * 0.99))]
    return LoadReport(
        offered_rate=messages_per_second,
        duration_s=round(elapsed, 3),
        processed=processed,
        processed_per_sec=round(processed / elapsed, 3) if elapsed > 0 else 0.0,
        p99_latency_ms=round(p99, 3),
        max_latency_ms=round(ordered[-1], 3),
    )
