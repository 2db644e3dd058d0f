"""Multi-tenant administrative API over the engine: studies, participants,
manual transitions, audit retrieval, metrics, CSV export, web chat, and the
gateway webhook.

Handlers are stateless; writes delegate to engine operations under its lock,
reads serve point-in-time copies. Researchers authenticate with static
bearer tokens from config; the gateway webhook is the one unauthenticated
endpoint (provider callbacks carry no researcher token).
"""
from __future__ import annotations

import csv
import io
import logging
from datetime import datetime, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import audit as audit_kinds
from .clock import as_utc, iso, parse_iso
from .dsl import export_dot
from .engine import (
    DuplicateParticipantError,
    Engine,
    UnknownParticipantError,
    UnknownStateError,
    UnknownStudyError,
)
from .packs import PackLoadError, load_pack, load_shipped_pack, shipped_pack_names
from .persistence import SnapshotManager

logger = logging.getLogger(__name__)

EXPORT_COLUMNS = [
    "participant_id", "study_id", "date", "final_state", "successes",
    "failures", "unrecognized", "success_rate", "error_rate",
]


def _machine_doc(machine) -> dict:
    return {
        "participant_id": machine.participant_id,
        "study_id": machine.study_id,
        "current_state": machine.current_state,
        "state_entered_at": iso(machine.state_entered_at),
        "registered_at": iso(machine.registered_at),
        "contact_address": machine.contact_address,
        "timezone": machine.timezone,
        "status": machine.status,
        "context": dict(machine.context),
    }


def _study_doc(study) -> dict:
    return {
        "study_id": study.study_id,
        "name": study.name,
        "pack": study.pack.name,
        "protocol_id": study.pack.compiled.protocol_id,
        "protocol_version": study.pack.compiled.version_hash,
        "timezone_default": study.timezone_default,
        "staff_addresses": list(study.staff_addresses),
        "status": study.status,
        "created_at": iso(study.created_at),
    }


def _record_doc(record) -> dict:
    return {
        "seq": record.seq,
        "participant_id": record.participant_id,
        "timestamp": iso(record.timestamp),
        "kind": record.kind,
        "detail": record.detail,
    }


def export_rows(engine: Engine, study_id: str, now: datetime | None = None) -> list[dict]:
    """One row per participant per enrolled day, derived entirely from the
    audit log: daily state/counts plus cumulative rates."""
    with engine._lock:
        if study_id not in engine.studies:
            raise UnknownStudyError(study_id)
        machines = [m for m in engine.machines.values() if m.study_id == study_id]
        now = as_utc(now) if now else engine.clock.now()
        rows = []
        for machine in machines:
            records = engine.audit.records(participant_id=machine.participant_id)
            tz = ZoneInfo(machine.timezone)
            first_day = machine.registered_at.astimezone(tz).date()
            last_day = now.astimezone(tz).date()
            state = None
            cum_successes = cum_failures = cum_unrecognized = cum_in = 0
            day = first_day
            index = 0
            while day <= last_day:
                successes = failures = unrecognized = 0
                while index < len(records) and (
                    records[index].timestamp.astimezone(tz).date() <= day
                ):
                    record = records[index]
                    if record.kind == audit_kinds.TRANSITION:
                        state = record.detail.get("to", state)
                        fast = record.detail.get("fast")
                        if fast is not None:
                            if fast["success"]:
                                successes += 1
                            else:
                                failures += 1
                    elif record.kind == audit_kinds.MANUAL and \
                            record.detail.get("action") == "transition":
                        state = record.detail["target"]
                    elif record.kind == audit_kinds.REJECTION and \
                            record.detail.get("category") == "unrecognized":
                        unrecognized += 1
                    elif record.kind == audit_kinds.MESSAGE_IN:
                        cum_in += 1
                    index += 1
                cum_successes += successes
                cum_failures += failures
                cum_unrecognized += unrecognized
                days_so_far = (day - first_day).days + 1
                rows.append({
                    "participant_id": machine.participant_id,
                    "study_id": study_id,
                    "date": day.isoformat(),
                    "final_state": state or "",
                    "successes": successes,
                    "failures": failures,
                    "unrecognized": unrecognized,
                    "success_rate": round(cum_successes / days_so_far, 6),
                    "error_rate": round(cum_unrecognized / cum_in, 6) if cum_in else 0.0,
                })
                day = day + timedelta(days=1)
        return rows


def export_csv(engine: Engine, study_id: str, now: datetime | None = None) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=EXPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in export_rows(engine, study_id, now):
        writer.writerow(row)
    return buffer.getvalue()


def create_app(
    engine: Engine,
    tokens: dict[str, str],
    snapshots: SnapshotManager | None = None,
    packs_dir: str | Path | None = None,
    console_dir: str | Path | None = None,
) -> FastAPI:
    """Build the FastAPI app. ``tokens`` maps bearer token -> researcher name."""
    app = FastAPI(title="protoflow admin", version="0.1.0")

    def authenticate(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            token = header[7:].strip()
            if token in tokens:
                return tokens[token]
        raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    def resolve_pack(ref: str):
        if "/" in ref or "\\" in ref:
            return load_pack(ref)
        if packs_dir is not None and (Path(packs_dir) / ref / "protocol.pfp").exists():
            return load_pack(Path(packs_dir) / ref)
        return load_shipped_pack(ref)

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok", "studies": len(engine.studies),
                "participants": len(engine.machines)}

    @app.get("/api/packs")
    def list_packs(actor: str = Depends(authenticate)) -> dict:
        return {"packs": shipped_pack_names()}

    @app.get("/studies")
    def list_studies(actor: str = Depends(authenticate)) -> dict:
        with engine._lock:
            return {"studies": [_study_doc(s) for s in engine.studies.values()]}

    @app.post("/studies", status_code=201)
    def create_study(body: dict, actor: str = Depends(authenticate)) -> dict:
        name = body.get("name")
        pack_ref = body.get("pack")
        if not name or not pack_ref:
            raise HTTPException(status_code=422, detail="name and pack are required")
        study_id = body.get("study_id") or f"study-{len(engine.studies) + 1}"
        try:
            pack = resolve_pack(pack_ref)
        except PackLoadError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except FileNotFoundError as exc:
            raise HTTPException(status_code=422, detail=f"pack not found: {exc}")
        try:
            study = engine.create_study(
                study_id, name, pack,
                timezone_default=body.get("timezone", "UTC"),
                staff_addresses=tuple(body.get("staff", [])),
            )
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return _study_doc(study)

    @app.post("/studies/{study_id}/participants", status_code=201)
    def register_participant(study_id: str, body: dict,
                             actor: str = Depends(authenticate)) -> dict:
        try:
            machine = engine.register_participant(
                study_id,
                body.get("participant_id", ""),
                body.get("contact_address", ""),
                timezone=body.get("timezone"),
            )
        except UnknownStudyError:
            raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
        except DuplicateParticipantError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return _machine_doc(machine)

    @app.get("/studies/{study_id}/participants")
    def list_participants(study_id: str, state: str | None = None,
                          actor: str = Depends(authenticate)) -> dict:
        try:
            machines = engine.list_participants(study_id, state=state)
        except UnknownStudyError:
            raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
        return {"participants": [_machine_doc(m) for m in machines]}

    @app.get("/studies/{study_id}/metrics")
    def study_metrics(study_id: str, actor: str = Depends(authenticate)) -> dict:
        try:
            metrics = engine.study_metrics(study_id)
        except UnknownStudyError:
            raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
        with engine._lock:
            counters = dict(engine.studies[study_id].metrics.counters)
            escalations = engine.studies[study_id].metrics.escalations
        doc = metrics.to_doc()
        doc["counters"] = counters
        doc["escalations"] = escalations
        return doc

    @app.get("/studies/{study_id}/graph")
    def study_graph(study_id: str, actor: str = Depends(authenticate)) -> dict:
        with engine._lock:
            study = engine.studies.get(study_id)
            if study is None:
                raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
            return {
                "dot": export_dot(study.pack.graph),
                "states": sorted(study.pack.compiled.states),
                "initial_state": study.pack.compiled.initial_state,
            }

    @app.get("/studies/{study_id}/export.csv")
    def study_export(study_id: str, actor: str = Depends(authenticate)) -> Response:
        try:
            text = export_csv(engine, study_id)
        except UnknownStudyError:
            raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
        return PlainTextResponse(text, media_type="text/csv")

    @app.get("/participants/{participant_id}")
    def get_participant(participant_id: str, actor: str = Depends(authenticate)) -> dict:
        with engine._lock:
            machine = engine.machines.get(participant_id)
            if machine is None:
                raise HTTPException(status_code=404,
                                    detail=f"unknown participant {participant_id!r}")
            return _machine_doc(machine)

    @app.get("/participants/{participant_id}/audit")
    def participant_audit(
        participant_id: str,
        request: Request,
        actor: str = Depends(authenticate),
    ) -> dict:
        bounds: dict = {}
        for param, seq_key, ts_key in (("from", "since_seq", "since_ts"),
                                       ("to", "until_seq", "until_ts")):
            raw = request.query_params.get(param)
            if raw is None or raw == "":
                continue
            if raw.isdigit():
                bounds[seq_key] = int(raw)
            else:
                try:
                    bounds[ts_key] = parse_iso(raw)
                except ValueError:
                    raise HTTPException(status_code=422,
                                        detail=f"{param} must be a seq or RFC 3339 time")
        try:
            records = engine.audit_trail(participant_id, **bounds)
        except UnknownParticipantError:
            raise HTTPException(status_code=404,
                                detail=f"unknown participant {participant_id!r}")
        return {"records": [_record_doc(r) for r in records]}

    @app.post("/participants/{participant_id}/transition")
    def manual_transition(participant_id: str, body: dict,
                          actor: str = Depends(authenticate)) -> dict:
        target = body.get("target_state", "")
        reason = body.get("reason", "")
        try:
            outcome = engine.manual_transition(participant_id, target, actor, reason)
        except UnknownParticipantError:
            raise HTTPException(status_code=404,
                                detail=f"unknown participant {participant_id!r}")
        except UnknownStateError:
            raise HTTPException(status_code=409, detail=f"unknown state {target!r}")
        machine = engine.machines[participant_id]
        return {
            "result": outcome.result,
            "from_state": outcome.from_state,
            "to_state": outcome.to_state,
            "participant": _machine_doc(machine),
        }

    @app.post("/chat/{session_id}", status_code=200)
    def chat(session_id: str, body: dict, actor: str = Depends(authenticate)) -> dict:
        address = f"chat:{session_id}"
        before = len(engine.gateway.store.outbound)
        msg = engine.gateway.receive({
            "from": address,
            "body": body.get("text", ""),
            "timestamp": engine.clock.now(),
        })
        engine.gateway.pump()
        participant_id = engine._resolve_address(address)
        replies = [
            m.body for m in engine.gateway.store.outbound[before:]
            if m.to_address == address
        ]
        return {
            "delivered": msg is not None and participant_id is not None,
            "participant_id": participant_id,
            "replies": replies,
        }

    @app.post("/gateway/inbound", status_code=202)
    async def gateway_inbound(request: Request) -> dict:
        content_type = request.headers.get("content-type", "")
        if "json" in content_type:
            raw = await request.json()
        else:
            form = await request.form()
            raw = dict(form)
            if "media" in raw and isinstance(raw["media"], str):
                raw["media"] = [{"ref": raw["media"]}]
        if isinstance(raw.get("timestamp"), str):
            try:
                raw["timestamp"] = parse_iso(raw["timestamp"])
            except ValueError:
                raw.pop("timestamp")
        msg = engine.gateway.receive(raw)
        engine.gateway.pump()
        return {"accepted": msg is not None}

    @app.post("/admin/snapshot", status_code=201)
    def take_snapshot(actor: str = Depends(authenticate)) -> dict:
        if snapshots is None:
            raise HTTPException(status_code=409, detail="snapshots are not configured")
        path = snapshots.take(engine)
        return {"path": str(path)}

    if console_dir is not None and Path(console_dir).exists():
        app.mount("/", StaticFiles(directory=str(console_dir), html=True), name="console")

    return app
