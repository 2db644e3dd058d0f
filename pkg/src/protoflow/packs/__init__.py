"""Protocol packs: a directory bundling DSL source (protocol.pfp), message
templates (templates.toml), tool declarations with scripted extraction rules
(tools.pft), and an optional hooks.py host extension providing guards,
effects, and an inbound-message classifier.

Shipped packs live under protoflow/packs/: tre (time-restricted eating),
optimalct (preoperative beta-blocker adherence), plantdiet (meal-photo
diet tracking).
"""
from __future__ import annotations

import importlib.util
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..conversations import ExtractionRule, ToolFunction
from ..dsl import (
    CompiledProtocol,
    ProtocolGraph,
    compile_protocol,
    parse_protocol,
)

SHIPPED_DIR = Path(__file__).parent


class PackLoadError(Exception):
    pass


@dataclass(frozen=True)
class ClassifiedMessage:
    keyword: str
    payload: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class RejectedMessage:
    """Unrecognized inbound message: counted toward the error rate and
    answered with the canonical response text, when one exists."""

    reason: str
    response: str | None = None


def default_classifier(msg, tz_name: str):
    """Fallback classification: the first whitespace token, lowercased."""
    tokens = msg.body.strip().split()
    return ClassifiedMessage(tokens[0].lower() if tokens else "")


@dataclass
class EffectContext:
    """Everything a pack effect may touch; handed to effects invoked by
    ``metric`` actions."""

    engine: object
    machine: object
    study: object
    payload: dict
    now: object
    extras: dict

    @property
    def tz(self) -> str:
        return self.machine.timezone

    def get(self, key: str, default=None):
        return self.machine.context.get(key, default)

    def set(self, key: str, value) -> None:
        self.machine.context[key] = value

    def pop(self, key: str, default=None):
        return self.machine.context.pop(key, default)

    def send(self, text: str) -> None:
        self.engine._send_text(self.machine, text)

    def send_template(self, template_id: str) -> None:
        self.engine._send_template(self.machine, self.study, template_id, self.payload)

    def notify_staff(self, reason: str, category: str = "protocol") -> None:
        self.engine._notify_staff(self.study, self.machine.participant_id, reason, category)

    def record_fast(self, fast) -> None:
        self.engine.record_fast(self.study, fast)
        self.extras["fast"] = fast.to_doc()

    def start_checkin(self, tool_names: list[str]) -> bool:
        """Open a conversation session bound to the named tools and ask the
        first tool's declared question. No-op (returns False) when the
        participant already has an open session."""
        conversations = self.engine.conversations
        if conversations.open_session_for(self.machine.participant_id) is not None:
            return False
        session = conversations.open_session(
            self.machine.participant_id, tool_names, tz_name=self.tz
        )
        question = conversations.tools[tool_names[0]].question
        self.engine.audit.append(
            "notification", self.machine.participant_id, self.now,
            {"category": "session_opened", "session_id": session.session_id,
             "tools": list(tool_names), "question": question,
             "reason": f"check-in session {session.session_id} opened"},
        )
        conversations.ask(session, question)
        return True


@dataclass
class ProtocolPack:
    name: str
    path: Path | None
    graph: ProtocolGraph
    compiled: CompiledProtocol
    templates: dict[str, str]
    tools: list[ToolFunction]
    guards: dict = field(default_factory=dict)
    effects: dict = field(default_factory=dict)
    classifier: object = None

    def classify(self, msg, tz_name: str):
        classifier = self.classifier or default_classifier
        return classifier(msg, tz_name)


# ---------------------------------------------------------------------------
# tools.pft parsing

_VALID_PARAM_TYPES = {"text", "number", "instant", "boolean"}


def parse_tools_file(text: str, source_name: str = "tools.pft") -> list[ToolFunction]:
    """Line-oriented tool declarations:

        tool med_checkin
          param when text
          validator did_take_medication
          question "When did you last take your beta blocker?"
          restate "Could you tell me when you last took it?"
          match phrase "this morning" -> when="this morning"
          match regex "(\\d+ ?[ap]m)" -> when=$1
        end
    """
    tools: list[ToolFunction] = []
    current: dict | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise PackLoadError(f"{source_name}:{lineno}: {exc}") from exc
        head = parts[0]
        if head == "tool":
            if current is not None:
                raise PackLoadError(f"{source_name}:{lineno}: nested tool declaration")
            if len(parts) != 2:
                raise PackLoadError(f"{source_name}:{lineno}: expected 'tool NAME'")
            current = {"name": parts[1], "params": [], "validator": "",
                       "question": "", "restate": [], "rules": []}
            continue
        if current is None:
            raise PackLoadError(f"{source_name}:{lineno}: {head!r} outside a tool block")
        if head == "end":
            if not current["validator"]:
                raise PackLoadError(
                    f"{source_name}:{lineno}: tool {current['name']!r} has no validator"
                )
            names = [n for n, _ in current["params"]]
            if len(names) != len(set(names)):
                raise PackLoadError(
                    f"{source_name}:{lineno}: duplicate parameter in {current['name']!r}"
                )
            tools.append(
                ToolFunction(
                    name=current["name"],
                    parameters=tuple(current["params"]),
                    validator=current["validator"],
                    question=current["question"],
                    restatements=tuple(current["restate"]),
                    rules=tuple(current["rules"]),
                )
            )
            current = None
        elif head == "param":
            if len(parts) != 3 or parts[2] not in _VALID_PARAM_TYPES:
                raise PackLoadError(
                    f"{source_name}:{lineno}: expected 'param NAME "
                    f"{{text|number|instant|boolean}}'"
                )
            current["params"].append((parts[1], parts[2]))
        elif head == "validator":
            current["validator"] = parts[1]
        elif head == "question":
            current["question"] = parts[1]
        elif head == "restate":
            current["restate"].append(parts[1])
        elif head == "match":
            if len(parts) < 4 or parts[1] not in ("phrase", "regex") or "->" not in parts:
                raise PackLoadError(
                    f"{source_name}:{lineno}: expected 'match phrase|regex PATTERN -> "
                    f"name=value ...'"
                )
            arrow = parts.index("->")
            pattern = " ".join(parts[2:arrow])
            bindings = []
            for binding in parts[arrow + 1:]:
                if "=" not in binding:
                    raise PackLoadError(
                        f"{source_name}:{lineno}: binding {binding!r} is not name=value"
                    )
                name, value = binding.split("=", 1)
                bindings.append((name, value))
            current["rules"].append(ExtractionRule(parts[1], pattern, tuple(bindings)))
        else:
            raise PackLoadError(f"{source_name}:{lineno}: unknown directive {head!r}")
    if current is not None:
        raise PackLoadError(f"{source_name}: unterminated tool {current['name']!r}")
    return tools


# ---------------------------------------------------------------------------
# loading


def _load_hooks(path: Path) -> dict:
    hooks_path = path / "hooks.py"
    if not hooks_path.exists():
        return {}
    module_name = f"protoflow_pack_{path.name}"
    if module_name in sys.modules:
        module = sys.modules[module_name]
    else:
        spec = importlib.util.spec_from_file_location(module_name, hooks_path)
        module = importlib.util.module_from_spec(spec)
        sys.modules[module_name] = module
        spec.loader.exec_module(module)
    return {
        "guards": getattr(module, "GUARDS", {}),
        "effects": getattr(module, "EFFECTS", {}),
        "classifier": getattr(module, "classify", None),
    }


def load_pack(path: str | Path) -> ProtocolPack:
    """Load and compile one pack directory. Raises PackLoadError with the
    compiler's diagnostics when the DSL does not compile."""
    path = Path(path)
    source_path = path / "protocol.pfp"
    if not source_path.exists():
        raise PackLoadError(f"{path}: missing protocol.pfp")
    source = source_path.read_text(encoding="utf-8")
    graph, diagnostics = parse_protocol(source)
    if graph is None:
        rendered = "\n".join(d.render(str(source_path)) for d in diagnostics)
        raise PackLoadError(f"pack {path.name} failed to parse:\n{rendered}")

    hooks = _load_hooks(path)
    guards = dict(hooks.get("guards", {}))

    templates = dict(graph.templates)
    templates_path = path / "templates.toml"
    if templates_path.exists():
        doc = tomllib.loads(templates_path.read_text(encoding="utf-8"))
        templates.update(doc.get("templates", doc))

    tools: list[ToolFunction] = []
    tools_path = path / "tools.pft"
    if tools_path.exists():
        tools = parse_tools_file(tools_path.read_text(encoding="utf-8"), str(tools_path))

    from ..dsl import ERROR, ProtocolCompileError

    try:
        compiled = compile_protocol(graph, known_guards=set(guards))
    except ProtocolCompileError as exc:
        rendered = "\n".join(
            d.render(str(source_path)) for d in exc.diagnostics if d.severity == ERROR
        )
        raise PackLoadError(f"pack {path.name} failed to compile:\n{rendered}") from exc

    return ProtocolPack(
        name=path.name,
        path=path,
        graph=graph,
        compiled=compiled,
        templates=templates,
        tools=tools,
        guards=guards,
        effects=dict(hooks.get("effects", {})),
        classifier=hooks.get("classifier"),
    )


def load_shipped_pack(name: str) -> ProtocolPack:
    return load_pack(SHIPPED_DIR / name)


def shipped_pack_names() -> list[str]:
    return sorted(
        p.name for p in SHIPPED_DIR.iterdir()
        if p.is_dir() and (p / "protocol.pfp").exists()
    )
