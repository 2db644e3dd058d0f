"""Append-only audit records: every message, transition, rejection, manual
action, and notification, with gapless per-engine sequence numbers.

On disk each record is one JSON line carrying a CRC32 of its canonical body.
Segments rotate at a size threshold; reads verify checksums and distinguish a
truncated tail (tolerated, reported) from mid-file corruption (refused).
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable

from .clock import iso, parse_iso

MESSAGE_IN = "message_in"
MESSAGE_OUT = "message_out"
TRANSITION = "transition"
REJECTION = "rejection"
MANUAL = "manual"
NOTIFICATION = "notification"
SNAPSHOT_MARKER = "snapshot_marker"

KINDS = frozenset(
    [MESSAGE_IN, MESSAGE_OUT, TRANSITION, REJECTION, MANUAL, NOTIFICATION, SNAPSHOT_MARKER]
)

DEFAULT_SEGMENT_BYTES = 64 * 1024 * 1024


class AuditCorruptionError(Exception):
    """A record failed its checksum with valid data following it."""


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    participant_id: str | None
    timestamp: datetime
    kind: str
    detail: dict = field(default_factory=dict, hash=False)

    def to_json(self) -> str:
        body = {
            "seq": self.seq,
            "participant_id": self.participant_id,
            "ts": iso(self.timestamp),
            "kind": self.kind,
            "detail": self.detail,
        }
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
        crc = zlib.crc32(canonical.encode()) & 0xFFFFFFFF
        body["crc"] = f"{crc:08x}"
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AuditRecord":
        doc = json.loads(line)
        crc = doc.pop("crc", None)
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        expected = f"{zlib.crc32(canonical.encode()) & 0xFFFFFFFF:08x}"
        if crc != expected:
            raise ValueError(f"checksum mismatch on seq {doc.get('seq')}")
        return cls(
            seq=doc["seq"],
            participant_id=doc["participant_id"],
            timestamp=parse_iso(doc["ts"]),
            kind=doc["kind"],
            detail=doc["detail"],
        )


class SegmentWriter:
    """Newline-delimited segments with rotation and batched fsync."""

    def __init__(self, directory: str | Path, segment_bytes: int = DEFAULT_SEGMENT_BYTES,
                 fsync_every: int = 64):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.segment_bytes = segment_bytes
        self.fsync_every = fsync_every
        self._pending = 0
        existing = sorted(self.directory.glob("segment-*.log"))
        self._segment_no = (
            int(existing[-1].stem.split("-")[1]) if existing else 0
        )
        self._fh = open(self._segment_path(), "a", encoding="utf-8")

    def _segment_path(self) -> Path:
        return self.directory / f"segment-{self._segment_no}.log"

    def append(self, record: AuditRecord) -> None:
        line = record.to_json() + "\n"
        self._fh.write(line)
        self._fh.flush()
        self._pending += 1
        if self._pending >= self.fsync_every:
            self.sync()
        if self._fh.tell() >= self.segment_bytes:
            self._rotate()

    def sync(self) -> None:
        if self._pending:
            os.fsync(self._fh.fileno())
            self._pending = 0

    def _rotate(self) -> None:
        self.sync()
        self._fh.close()
        self._segment_no += 1
        self._fh = open(self._segment_path(), "a", encoding="utf-8")

    def close(self) -> None:
        self.sync()
        self._fh.close()


def read_segments(directory: str | Path) -> tuple[list[AuditRecord], bool]:
    """Load every record from a segment directory in sequence order.

    Returns (records, truncated_tail). A checksum failure on the very last
    line of the last segment is reported as a truncated tail; a failure with
    valid records after it raises AuditCorruptionError naming the segment.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("segment-*.log"), key=lambda p: int(p.stem.split("-")[1]))
    records: list[AuditRecord] = []
    truncated = False
    for i, path in enumerate(paths):
        lines = path.read_text(encoding="utf-8").splitlines()
        for j, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                records.append(AuditRecord.from_json(line))
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                is_tail = i == len(paths) - 1 and j == len(lines) - 1
                if is_tail:
                    truncated = True
                    break
                raise AuditCorruptionError(f"{path.name}: line {j + 1}: {exc}") from exc
    return records, truncated


class AuditLog:
    """In-memory record store with an optional on-disk segment writer.

    Sequence numbers are gapless per engine; the starting value is restored
    across restarts from the snapshot.
    """

    def __init__(self, writer: SegmentWriter | None = None, next_seq: int = 1):
        self._records: list[AuditRecord] = []
        self._writer = writer
        self._next_seq = next_seq

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def append(
        self,
        kind: str,
        participant_id: str | None,
        timestamp: datetime,
        detail: dict | None = None,
    ) -> AuditRecord:
        if kind not in KINDS:
            raise ValueError(f"unknown audit kind {kind!r}")
        record = AuditRecord(
            seq=self._next_seq,
            participant_id=participant_id,
            timestamp=timestamp,
            kind=kind,
            detail=detail or {},
        )
        self._next_seq += 1
        self._records.append(record)
        if self._writer is not None:
            self._writer.append(record)
        return record

    def records(
        self,
        participant_id: str | None = None,
        kind: str | None = None,
        since_seq: int | None = None,
        until_seq: int | None = None,
        since_ts: datetime | None = None,
        until_ts: datetime | None = None,
        predicate: Callable[[AuditRecord], bool] | None = None,
    ) -> list[AuditRecord]:
        out = []
        for r in self._records:
            if participant_id is not None and r.participant_id != participant_id:
                continue
            if kind is not None and r.kind != kind:
                continue
            if since_seq is not None and r.seq < since_seq:
                continue
            if until_seq is not None and r.seq > until_seq:
                continue
            if since_ts is not None and r.timestamp < since_ts:
                continue
            if until_ts is not None and r.timestamp > until_ts:
                continue
            if predicate is not None and not predicate(r):
                continue
            out.append(r)
        return out

    def count(self, kind: str | None = None, **kwargs) -> int:
        return len(self.records(kind=kind, **kwargs))

    def all_records(self) -> list[AuditRecord]:
        return list(self._records)

    def extend_from(self, records: Iterable[AuditRecord]) -> None:
        """Rehydrate the in-memory view (restore path); does not re-write disk."""
        for r in records:
            self._records.append(r)
            self._next_seq = max(self._next_seq, r.seq + 1)

    def sync(self) -> None:
        if self._writer is not None:
            self._writer.sync()

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
