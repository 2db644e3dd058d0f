"""protoflow command line: compile protocols, run simulations, manage
snapshots, and serve the admin API.

    protoflow compile <file> [--dot out.dot] [--check]
    protoflow sim run <scenario.json> [--report out.json] [--data-dir dir]
    protoflow sim load --rate 40 --secs 60
    protoflow sim replay <audit dir>
    protoflow snapshot list <dir> | restore <path> [--packs-dir dir]
    protoflow serve --config cfg.toml [--host 127.0.0.1] [--port 8000]
"""
from __future__ import annotations

import argparse
import json
import sys
import threading
import time as time_mod
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def cmd_compile(args: argparse.Namespace) -> int:
    from .dsl import ERROR, ProtocolCompileError, compile_protocol, export_dot, parse_protocol

    path = Path(args.file)
    try:
        source = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"{path}: error: {exc}", file=sys.stderr)
        return 1
    graph, diagnostics = parse_protocol(source)
    exit_code = 0
    if graph is not None:
        try:
            compile_protocol(graph)
        except ProtocolCompileError as exc:
            diagnostics = diagnostics + exc.diagnostics
        else:
            from .dsl import validate_graph

            diagnostics = diagnostics + validate_graph(graph)
    for diag in sorted(set(diagnostics), key=lambda d: (d.line, d.col, d.severity)):
        print(diag.render(str(path)), file=sys.stderr)
    if graph is None or any(d.severity == ERROR for d in diagnostics):
        return 1
    if args.dot and not args.check:
        Path(args.dot).write_text(export_dot(graph), encoding="utf-8")
        print(f"wrote {args.dot}")
    if not args.check and not args.dot:
        from .dsl import compile_protocol as _compile

        compiled = _compile(graph)
        print(f"{compiled.protocol_id}: {len(compiled.states)} states, "
              f"{len(compiled.transitions)} transitions, "
              f"version {compiled.version_hash[:12]}")
    return exit_code


def cmd_sim_run(args: argparse.Namespace) -> int:
    from .simulator import ScenarioConfig, run_scenario

    config = ScenarioConfig.from_file(args.scenario)
    report = run_scenario(config, data_dir=args.data_dir)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.report}")
    else:
        print(text)
    return 0


def cmd_sim_load(args: argparse.Namespace) -> int:
    from .simulator import load_test

    report = load_test(args.rate, args.secs)
    print(json.dumps(report.to_doc(), indent=2, sort_keys=True))
    return 0 if report.processed_per_sec >= args.rate else 1


def cmd_sim_replay(args: argparse.Namespace) -> int:
    from .simulator import replay_scenario

    try:
        report = replay_scenario(args.audit_dir)
    except Exception as exc:
        print(f"replay failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_snapshot(args: argparse.Namespace) -> int:
    from .persistence import SnapshotManager, read_snapshot

    if args.action == "list":
        manager = SnapshotManager(args.path)
        for path in manager.list_snapshots():
            print(path)
        return 0
    if args.action == "take":
        # asks a running service to quiesce and snapshot
        import httpx

        url = args.path.rstrip("/") + "/admin/snapshot"
        response = httpx.post(
            url, headers={"Authorization": f"Bearer {args.token or ''}"}, timeout=30
        )
        if response.status_code != 201:
            print(f"snapshot failed: {response.status_code} {response.text}",
                  file=sys.stderr)
            return 1
        print(response.json()["path"])
        return 0
    if args.action == "restore":
        from .packs import load_pack, load_shipped_pack
        from .persistence import restore_engine

        doc = read_snapshot(args.path)
        packs = {}
        needed = {s["pack_name"] for s in doc["studies"]}
        for name in needed:
            if args.packs_dir:
                packs[name] = load_pack(Path(args.packs_dir) / name)
            else:
                packs[name] = load_shipped_pack(name)
        engine = restore_engine(doc, packs)
        print(f"restored snapshot seq={doc['sequence']} taken_at={doc['taken_at']}")
        print(f"  studies: {len(engine.studies)}  participants: {len(engine.machines)}  "
              f"timers: {len(engine.timers)}  pending sends: {len(engine.gateway.pending)}")
        return 0
    print(f"unknown snapshot action {args.action!r}", file=sys.stderr)
    return 1


def build_service(config: dict):
    """Assemble engine + app + snapshot manager from a parsed config document.
    Shared by `serve` and by tests."""
    from .admin import create_app
    from .audit import AuditLog, SegmentWriter
    from .engine import Engine
    from .gateway import HttpProviderAdapter, NumberPool
    from .packs import load_pack, load_shipped_pack
    from .persistence import SnapshotManager, SnapshotPolicy
    from datetime import timedelta

    data_dir = Path(config.get("data_dir", "data"))
    gateway_cfg = config.get("gateway", {})
    provider = None
    numbers = tuple(gateway_cfg.get("numbers", ["+15550000001"]))
    if gateway_cfg.get("mode", "sim") == "provider":
        provider = HttpProviderAdapter()
        numbers = provider.pool_numbers() or numbers
    audit_log = AuditLog(writer=SegmentWriter(data_dir / "audit"))
    engine = Engine(pool=NumberPool(numbers=numbers), audit_log=audit_log,
                    provider=provider)

    packs_dir = config.get("packs_dir")
    for study_cfg in config.get("studies", []):
        ref = study_cfg["pack"]
        if packs_dir and (Path(packs_dir) / ref / "protocol.pfp").exists():
            pack = load_pack(Path(packs_dir) / ref)
        else:
            pack = load_shipped_pack(ref)
        engine.create_study(
            study_cfg.get("study_id", ref),
            study_cfg.get("name", ref),
            pack,
            timezone_default=study_cfg.get("timezone", "UTC"),
            staff_addresses=tuple(study_cfg.get("staff", [])),
        )

    snap_cfg = config.get("snapshot", {})
    policy = SnapshotPolicy(
        interval=timedelta(minutes=snap_cfg.get("interval_minutes", 15)),
        retain=snap_cfg.get("retain", 8),
    )
    snapshots = SnapshotManager(data_dir / "snapshots", policy)
    tokens = {token: name for name, token in config.get("tokens", {}).items()}
    app = create_app(engine, tokens, snapshots=snapshots, packs_dir=packs_dir,
                     console_dir=config.get("console_dir"))
    return engine, app, snapshots


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
    engine, app, snapshots = build_service(config)

    stop = threading.Event()

    def driver() -> None:
        while not stop.is_set():
            engine.tick()
            if snapshots.due(engine.clock.now()):
                snapshots.take(engine)
            stop.wait(1.0)

    thread = threading.Thread(target=driver, daemon=True)
    thread.start()
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    finally:
        stop.set()
        thread.join(timeout=2)
        engine.audit.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p_compile = sub.add_parser("compile", help="compile a protocol definition")
    p_compile.add_argument("file")
    p_compile.add_argument("--dot", help="write a DOT graph to this path")
    p_compile.add_argument("--check", action="store_true",
                           help="diagnostics only; write nothing")
    p_compile.set_defaults(func=cmd_compile)

    p_sim = sub.add_parser("sim", help="cohort simulation")
    sim_sub = p_sim.add_subparsers(dest="sim_command", required=True)
    p_run = sim_sub.add_parser("run")
    p_run.add_argument("scenario")
    p_run.add_argument("--report")
    p_run.add_argument("--data-dir")
    p_run.set_defaults(func=cmd_sim_run)
    p_load = sim_sub.add_parser("load")
    p_load.add_argument("--rate", type=float, default=40.0)
    p_load.add_argument("--secs", type=float, default=60.0)
    p_load.set_defaults(func=cmd_sim_load)
    p_replay = sim_sub.add_parser("replay")
    p_replay.add_argument("audit_dir")
    p_replay.set_defaults(func=cmd_sim_replay)

    p_snapshot = sub.add_parser("snapshot", help="take, inspect, and restore snapshots")
    p_snapshot.add_argument("action", choices=["take", "list", "restore"])
    p_snapshot.add_argument("path", help="service URL for take; directory for list; "
                                         "snapshot file for restore")
    p_snapshot.add_argument("--packs-dir")
    p_snapshot.add_argument("--token", help="bearer token for take")
    p_snapshot.set_defaults(func=cmd_snapshot)

    p_serve = sub.add_parser("serve", help="run the admin service")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
