"""protoflow: research-protocol adherence automation.

Declarative protocol graphs compile to per-participant finite state
machines; a single-writer engine drives them with messages, timers, and
tool-validated conversations, producing an auditable trail and adherence
metrics, with periodic snapshots for exact recovery.
"""

__version__ = "0.1.0"

from .clock import SystemClock, VirtualClock
from .dsl import (
    CompileDiagnostic,
    CompiledProtocol,
    ProtocolCompileError,
    ProtocolGraph,
    compile_protocol,
    export_dot,
    parse_protocol,
    validate_graph,
)
from .engine import Engine, ParticipantMachine, TransitionOutcome, replay
from .packs import ProtocolPack, load_pack, load_shipped_pack

__all__ = [
    "CompileDiagnostic",
    "CompiledProtocol",
    "Engine",
    "ParticipantMachine",
    "ProtocolCompileError",
    "ProtocolGraph",
    "ProtocolPack",
    "SystemClock",
    "TransitionOutcome",
    "VirtualClock",
    "compile_protocol",
    "export_dot",
    "load_pack",
    "load_shipped_pack",
    "parse_protocol",
    "replay",
    "validate_graph",
]
