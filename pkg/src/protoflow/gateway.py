"""Messaging gateway: inbound persistence and routing, outbound dispatch
through a rate-limited phone-number pool, and a simulated provider for tests.

Outgoing throughput is capped per sender number (default 100 msgs/sec, the
pool scales linearly with pool size). Buckets grant a full second's allowance
at whole-second boundaries, so no half-open one-second window ever carries
more than the per-number limit.
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

from .clock import as_utc, iso

logger = logging.getLogger(__name__)

E164_RE = re.compile(r"^\+[1-9]\d{1,14}$")
CHAT_RE = re.compile(r"^(chat|web):[A-Za-z0-9_.\-]+$")

DEFAULT_OUT_LIMIT = 100  # msgs/sec per sender number
DEFAULT_IN_LIMIT = 500   # provider-side inbound ceiling, simulation accounting only
MAX_SEND_ATTEMPTS = 5
BACKOFF_BASE = timedelta(seconds=1)


class AddressError(ValueError):
    pass


class NoCapacityError(RuntimeError):
    pass


def validate_address(address: str) -> str:
    if E164_RE.match(address) or CHAT_RE.match(address):
        return address
    raise AddressError(f"unparseable address {address!r}")


def arrival_rate_ok(instants: list[datetime], limit_per_second: int) -> bool:
    """Validity check against the provider-side inbound ceiling: no half-open
    one-second window may carry more than ``limit_per_second`` arrivals.
    Simulation accounting only; the receiver itself never drops messages."""
    ordered = sorted(instants)
    window_start = 0
    for i, at in enumerate(ordered):
        while at - ordered[window_start] >= timedelta(seconds=1):
            window_start += 1
        if i - window_start + 1 > limit_per_second:
            return False
    return True


@dataclass(frozen=True)
class Attachment:
    media_type: str
    size: int
    ref: str


@dataclass
class InboundMessage:
    message_id: str
    from_address: str
    body: str
    received_at: datetime
    attachments: tuple[Attachment, ...] = ()


@dataclass
class OutboundMessage:
    message_id: str
    to_address: str
    body: str
    created_at: datetime
    sent_at: datetime | None = None
    send_attempts: int = 0
    sender_number: str | None = None
    next_attempt_at: datetime | None = None


@dataclass
class NumberPool:
    numbers: tuple[str, ...]
    per_number_outgoing_limit: int = DEFAULT_OUT_LIMIT
    per_number_incoming_limit: int = DEFAULT_IN_LIMIT

    def capacity(self) -> int:
        """Outgoing msgs/sec across the whole pool."""
        return len(self.numbers) * self.per_number_outgoing_limit


class BlobStore:
    """Content-addressed attachment storage."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> str:
        ref = hashlib.sha256(data).hexdigest()
        path = self.directory / ref
        if not path.exists():
            path.write_bytes(data)
        return ref

    def get(self, ref: str) -> bytes:
        return (self.directory / ref).read_bytes()


class MessageStore:
    """In-memory archive of every message, inbound and outbound."""

    def __init__(self):
        self.inbound: list[InboundMessage] = []
        self.outbound: list[OutboundMessage] = []

    def store_inbound(self, msg: InboundMessage) -> int:
        self.inbound.append(msg)
        return len(self.inbound) - 1

    def store_outbound(self, msg: OutboundMessage) -> int:
        self.outbound.append(msg)
        return len(self.outbound) - 1

    def load_inbound(
        self,
        from_address: str | None = None,
        since: datetime | None = None,
        until: datetime | None = None,
    ) -> list[InboundMessage]:
        out = []
        for m in self.inbound:
            if from_address is not None and m.from_address != from_address:
                continue
            if since is not None and m.received_at < since:
                continue
            if until is not None and m.received_at > until:
                continue
            out.append(m)
        return out


class _Bucket:
    def __init__(self, limit: int, now: datetime):
        self.limit = limit
        self.tokens = limit
        self.last_refill = now

    def refill(self, now: datetime) -> None:
        if self.tokens >= self.limit:
            self.last_refill = now
            return
        elapsed = (now - self.last_refill).total_seconds()
        grants = int(elapsed)
        if grants > 0:
            self.tokens = min(self.limit, self.tokens + grants * self.limit)
            self.last_refill += timedelta(seconds=grants)
            if self.tokens >= self.limit:
                self.last_refill = now


class SimProvider:
    """In-memory provider: records deliveries, supports fault injection."""

    def __init__(self):
        self.delivered: list[tuple[str, OutboundMessage]] = []
        self._fail_budget = 0

    def fail_next(self, count: int) -> None:
        self._fail_budget = count

    def send(self, message: OutboundMessage, sender_number: str) -> bool:
        if self._fail_budget > 0:
            self._fail_budget -= 1
            return False
        self.delivered.append((sender_number, message))
        return True


class HttpProviderAdapter:
    """Skeleton adapter for a real SMS provider. Credentials come from the
    environment (PF_SMS_ACCOUNT, PF_SMS_TOKEN, PF_SMS_NUMBERS); send() posts a
    JSON payload to the configured endpoint. Never enabled by default."""

    def __init__(self, endpoint: str | None = None, client=None):
        self.account = os.environ.get("PF_SMS_ACCOUNT")
        self.token = os.environ.get("PF_SMS_TOKEN")
        self.endpoint = endpoint or os.environ.get("PF_SMS_ENDPOINT")
        self._client = client

    @property
    def configured(self) -> bool:
        return bool(self.account and self.token and self.endpoint)

    def pool_numbers(self) -> tuple[str, ...]:
        raw = os.environ.get("PF_SMS_NUMBERS", "")
        return tuple(n.strip() for n in raw.split(",") if n.strip())

    def send(self, message: OutboundMessage, sender_number: str) -> bool:
        if not self.configured:
            raise RuntimeError("SMS provider adapter is not configured")
        import httpx

        client = self._client or httpx
        response = client.post(
            self.endpoint,
            json={"from": sender_number, "to": message.to_address, "body": message.body},
            auth=(self.account, self.token),
        )
        return response.status_code < 400


@dataclass
class DeadLetter:
    raw: dict
    reason: str
    at: datetime


class MessagingGateway:
    """Receives, persists, and routes inbound messages; queues and dispatches
    outbound messages under the pool's rate limits.

    The engine wires ``resolve_address`` (address -> participant_id or None)
    and ``route_inbound`` (called for every routable message). pump() is
    invoked from the engine loop on every tick.
    """

    def __init__(
        self,
        clock,
        pool: NumberPool,
        provider=None,
        resolve_address=None,
        route_inbound=None,
        on_dead_letter=None,
        on_delivery_failed=None,
        blob_store: BlobStore | None = None,
    ):
        self.clock = clock
        self.pool = pool
        self.provider = provider or SimProvider()
        self.resolve_address = resolve_address or (lambda addr: None)
        self.route_inbound = route_inbound or (lambda msg, pid: None)
        self.on_dead_letter = on_dead_letter or (lambda letter: None)
        self.on_delivery_failed = on_delivery_failed or (lambda msg: None)
        self.blob_store = blob_store
        self.store = MessageStore()
        self.dead_letters: list[DeadLetter] = []
        self.pending: list[OutboundMessage] = []
        self.dispatch_log: list[tuple[str, datetime]] = []  # (sender number, instant)
        now = clock.now()
        self._buckets = {n: _Bucket(pool.per_number_outgoing_limit, now) for n in pool.numbers}
        self._rr = 0
        self._msg_counter = 0
        self._id_lock = threading.Lock()

    # -- inbound

    def _next_id(self, prefix: str) -> str:
        with self._id_lock:
            self._msg_counter += 1
            return f"{prefix}-{self._msg_counter}"

    def receive(self, raw: dict) -> InboundMessage | None:
        """Ingest a raw webhook payload {from, body, media[], timestamp}.

        Routable messages are persisted and handed to the engine; messages
        from malformed or unregistered addresses land in the dead-letter
        store instead.
        """
        received_at = as_utc(raw.get("timestamp") or self.clock.now())
        sender = str(raw.get("from", ""))
        try:
            validate_address(sender)
        except AddressError:
            letter = DeadLetter(raw, "malformed sender address", received_at)
            self.dead_letters.append(letter)
            self.on_dead_letter(letter)
            return None
        attachments = []
        for item in raw.get("media", []) or []:
            data = item.get("data")
            ref = item.get("ref", "")
            size = item.get("size", len(data) if data else 0)
            if data is not None and self.blob_store is not None:
                payload = data.encode() if isinstance(data, str) else data
                ref = self.blob_store.put(payload)
                size = len(payload)
            attachments.append(Attachment(item.get("media_type", "application/octet-stream"),
                                          size, ref))
        msg = InboundMessage(
            message_id=self._next_id("in"),
            from_address=sender,
            body=str(raw.get("body", "")),
            received_at=received_at,
            attachments=tuple(attachments),
        )
        self.store.store_inbound(msg)
        participant_id = self.resolve_address(sender)
        if participant_id is None:
            letter = DeadLetter(raw, "unregistered sender", received_at)
            self.dead_letters.append(letter)
            self.on_dead_letter(letter)
            return msg
        self.route_inbound(msg, participant_id)
        return msg

    # -- outbound

    def send(self, to_address: str, body: str) -> OutboundMessage:
        """Queue an outbound message; dispatch happens on pump()."""
        if not self.pool.numbers:
            raise NoCapacityError("number pool is empty; cannot send")
        msg = OutboundMessage(
            message_id=self._next_id("out"),
            to_address=to_address,
            body=body,
            created_at=self.clock.now(),
        )
        self.store.store_outbound(msg)
        self.pending.append(msg)
        return msg

    def _pick_number(self) -> str | None:
        numbers = self.pool.numbers
        for i in range(len(numbers)):
            candidate = numbers[(self._rr + i) % len(numbers)]
            if self._buckets[candidate].tokens >= 1:
                self._rr = (self._rr + i + 1) % len(numbers)
                return candidate
        return None

    def pump(self, now: datetime | None = None) -> int:
        """Dispatch eligible pending messages within the rate limits.
        Returns the number of messages handed to the provider."""
        now = as_utc(now) if now else self.clock.now()
        for bucket in self._buckets.values():
            bucket.refill(now)
        dispatched = 0
        remaining: list[OutboundMessage] = []
        for msg in self.pending:
            if msg.next_attempt_at is not None and msg.next_attempt_at > now:
                remaining.append(msg)
                continue
            number = self._pick_number()
            if number is None:
                remaining.append(msg)
                continue
            self._buckets[number].tokens -= 1
            msg.send_attempts += 1
            if self.provider.send(msg, number):
                msg.sent_at = now
                msg.sender_number = number
                self.dispatch_log.append((number, now))
                dispatched += 1
            elif msg.send_attempts >= MAX_SEND_ATTEMPTS:
                logger.warning("giving up on %s after %d attempts", msg.message_id,
                               msg.send_attempts)
                self.on_delivery_failed(msg)
            else:
                msg.next_attempt_at = now + BACKOFF_BASE * (2 ** (msg.send_attempts - 1))
                remaining.append(msg)
        self.pending = remaining
        return dispatched

    def drain(self, advance, max_seconds: int = 3600) -> None:
        """Pump until the queue empties, advancing a virtual clock as needed."""
        for _ in range(max_seconds):
            self.pump()
            if not self.pending:
                return
            advance(timedelta(seconds=1))
        raise NoCapacityError(f"queue failed to drain within {max_seconds}s")

    # -- snapshot support

    def snapshot_pending(self) -> list[dict]:
        return [
            {
                "message_id": m.message_id,
                "to_address": m.to_address,
                "body": m.body,
                "created_at": iso(m.created_at),
                "send_attempts": m.send_attempts,
                "next_attempt_at": iso(m.next_attempt_at) if m.next_attempt_at else None,
            }
            for m in self.pending
        ]

    def restore_pending(self, items: list[dict]) -> None:
        from .clock import parse_iso

        for item in items:
            msg = OutboundMessage(
                message_id=item["message_id"],
                to_address=item["to_address"],
                body=item["body"],
                created_at=parse_iso(item["created_at"]),
                send_attempts=item.get("send_attempts", 0),
                next_attempt_at=(
                    parse_iso(item["next_attempt_at"]) if item.get("next_attempt_at") else None
                ),
            )
            self.store.store_outbound(msg)
            self.pending.append(msg)
            counter = int(msg.message_id.split("-")[-1])
            self._msg_counter = max(self._msg_counter, counter)
