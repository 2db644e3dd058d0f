"""Protocol definition language: lexer, parser, graph validation, transition-table
compiler, and DOT export.

The language is line-agnostic and case-sensitive. Sketch:

    protocol "name" {
        state Idle initial { send "welcome" };
        state Done terminal;
        Idle -> Done on message "stop" guard allowed do metric "stopped";
        Idle -> Idle on at 20:00 do send "reminder";
        template welcome "Hi there";
    }

Comments run from ``#`` or ``//`` to end of line. Actions inside a state block
are entry actions unless prefixed with ``exit``. A transition whose source and
target are the same state is *internal*: its actions run but entry/exit actions
do not, and state-entry timers are not re-armed.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

ERROR = "error"
WARNING = "warning"

KEYWORDS = frozenset(
    [
        "protocol", "state", "initial", "terminal", "escalation", "on", "guard",
        "do", "message", "after", "at", "tool", "manual", "send", "schedule",
        "cancel", "metric", "notify_staff", "template", "exit",
    ]
)

FLAGS = ("initial", "terminal", "escalation")

DURATION_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


@dataclass(frozen=True)
class CompileDiagnostic:
    severity: str
    line: int
    col: int
    message: str

    def render(self, filename: str = "<source>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.severity}: {self.message}"


class ProtocolCompileError(Exception):
    """Raised by compile_protocol when the graph has outstanding errors."""

    def __init__(self, diagnostics: list[CompileDiagnostic]):
        self.diagnostics = diagnostics
        summary = "; ".join(d.message for d in diagnostics if d.severity == ERROR)
        super().__init__(f"protocol has errors: {summary}")


# ---------------------------------------------------------------------------
# Triggers and actions


@dataclass(frozen=True)
class MessageTrigger:
    keyword: str  # stored lowercased; matching is case-insensitive

    def key(self) -> tuple:
        return ("message", self.keyword)

    def label(self) -> str:
        return f'message "{self.keyword}"'


@dataclass(frozen=True)
class TimerTrigger:
    """Fires ``seconds`` after state entry, or daily at ``hh:mm`` wall clock."""

    reference: str  # "entry" | "clock"
    seconds: int = 0
    hh: int = 0
    mm: int = 0

    def key(self) -> tuple:
        if self.reference == "entry":
            return ("after", self.seconds)
        return ("at", self.hh, self.mm)

    def label(self) -> str:
        if self.reference == "entry":
            return f"after {format_duration(self.seconds)}"
        return f"at {self.hh:02d}:{self.mm:02d}"


@dataclass(frozen=True)
class ToolResultTrigger:
    tool: str
    outcome: str

    def key(self) -> tuple:
        return ("tool", self.tool, self.outcome)

    def label(self) -> str:
        return f"tool {self.tool}:{self.outcome}"


@dataclass(frozen=True)
class ManualTrigger:
    def key(self) -> tuple:
        return ("manual",)

    def label(self) -> str:
        return "manual"


Trigger = MessageTrigger | TimerTrigger | ToolResultTrigger | ManualTrigger


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # send_message | schedule | cancel | record_metric | notify_staff
    args: tuple[tuple[str, str], ...]

    def arg(self, name: str) -> str:
        for key, value in self.args:
            if key == name:
                return value
        raise KeyError(name)

    def label(self) -> str:
        return f"{self.kind}({', '.join(v for _, v in self.args)})"


def send_action(template_id: str) -> ActionSpec:
    return ActionSpec("send_message", (("template", template_id),))


def schedule_action(timer_id: str, seconds: int) -> ActionSpec:
    return ActionSpec("schedule", (("timer", timer_id), ("seconds", str(seconds))))


def cancel_action(timer_id: str) -> ActionSpec:
    return ActionSpec("cancel", (("timer", timer_id),))


def metric_action(name: str) -> ActionSpec:
    return ActionSpec("record_metric", (("name", name),))


def notify_action(reason: str) -> ActionSpec:
    return ActionSpec("notify_staff", (("reason", reason),))


def format_duration(seconds: int) -> str:
    for unit, mult in (("d", 86400), ("h", 3600), ("m", 60)):
        if seconds and seconds % mult == 0:
            return f"{seconds // mult}{unit}"
    return f"{seconds}s"


# ---------------------------------------------------------------------------
# Graph model


@dataclass
class StateDef:
    name: str
    flags: frozenset[str] = frozenset()
    entry_actions: tuple[ActionSpec, ...] = ()
    exit_actions: tuple[ActionSpec, ...] = ()
    line: int = 0
    col: int = 0

    @property
    def initial(self) -> bool:
        return "initial" in self.flags

    @property
    def terminal(self) -> bool:
        return "terminal" in self.flags


@dataclass
class TransitionDef:
    source: str
    target: str
    trigger: Trigger
    guard: str | None = None
    actions: tuple[ActionSpec, ...] = ()
    line: int = 0
    col: int = 0


@dataclass
class ProtocolGraph:
    protocol_id: str
    states: list[StateDef] = field(default_factory=list)
    transitions: list[TransitionDef] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    templates: dict[str, str] = field(default_factory=dict)
    source: str | None = None  # set by parse_protocol; None for programmatic graphs

    def state_names(self) -> list[str]:
        return [s.name for s in self.states]

    def state(self, name: str) -> StateDef:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    def canonical_encoding(self) -> bytes:
        doc = {
            "protocol_id": self.protocol_id,
            "states": [
                {
                    "name": s.name,
                    "flags": sorted(s.flags),
                    "entry": [[a.kind, list(map(list, a.args))] for a in s.entry_actions],
                    "exit": [[a.kind, list(map(list, a.args))] for a in s.exit_actions],
                }
                for s in self.states
            ],
            "transitions": [
                {
                    "source": t.source,
                    "target": t.target,
                    "trigger": list(t.trigger.key()),
                    "guard": t.guard,
                    "actions": [[a.kind, list(map(list, a.args))] for a in t.actions],
                }
                for t in self.transitions
            ],
            "metadata": self.metadata,
            "templates": self.templates,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*|//[^\n]*)
  | (?P<string>"(?:\\.|[^"\\])*")
  | (?P<time>\d{1,2}:\d{2})(?![\w:])
  | (?P<duration>\d+[smhd])(?![\w])
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<arrow>->)
  | (?P<punct>[{};,:])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    value: str
    line: int
    col: int


def _unquote(raw: str) -> str:
    body = raw[1:-1]
    return body.replace('\\"', '"').replace("\\\\", "\\")


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def tokenize(source: str) -> tuple[list[Token], list[CompileDiagnostic]]:
    tokens: list[Token] = []
    diagnostics: list[CompileDiagnostic] = []
    line, col, pos = 1, 1, 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if not match:
            diagnostics.append(
                CompileDiagnostic(ERROR, line, col, f"unexpected character {source[pos]!r}")
            )
            pos += 1
            col += 1
            continue
        kind = match.lastgroup or ""
        text = match.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = match.end()
    return tokens, diagnostics


def normalize_source(source: str) -> str:
    """Canonical token rendering: comments and whitespace stripped, order kept."""
    tokens, _ = tokenize(source)
    parts = []
    for tok in tokens:
        if tok.kind == "string":
            parts.append(_quote(_unquote(tok.value)))
        else:
            parts.append(tok.value)
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[Token], diagnostics: list[CompileDiagnostic]):
        self.tokens = tokens
        self.pos = 0
        self.diagnostics = diagnostics

    # -- token helpers

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def advance(self) -> Token | None:
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "ident" and tok.value == word

    def error(self, message: str, tok: Token | None = None) -> None:
        if tok is None:
            tok = self.peek() or (self.tokens[-1] if self.tokens else Token("eof", "", 1, 1))
        self.diagnostics.append(CompileDiagnostic(ERROR, tok.line, tok.col, message))

    def warn(self, message: str, line: int, col: int) -> None:
        self.diagnostics.append(CompileDiagnostic(WARNING, line, col, message))

    def expect_keyword(self, word: str) -> Token | None:
        tok = self.peek()
        if tok is None or tok.kind != "ident" or tok.value != word:
            self.error(f"expected '{word}'" + (f", found {tok.value!r}" if tok else ""))
            return None
        return self.advance()

    def expect_ident(self, what: str) -> Token | None:
        tok = self.peek()
        if tok is None or tok.kind != "ident":
            self.error(f"expected {what}" + (f", found {tok.value!r}" if tok else ""))
            return None
        if tok.value in KEYWORDS:
            self.error(f"keyword {tok.value!r} cannot be used as {what}", tok)
            self.advance()
            return None
        return self.advance()

    def expect_string(self, what: str) -> Token | None:
        tok = self.peek()
        if tok is None or tok.kind != "string":
            self.error(f"expected {what} string" + (f", found {tok.value!r}" if tok else ""))
            return None
        return self.advance()

    def expect_punct(self, char: str) -> Token | None:
        tok = self.peek()
        if tok is None or tok.kind not in ("punct", "arrow") or tok.value != char:
            self.error(f"expected '{char}'" + (f", found {tok.value!r}" if tok else ""))
            return None
        return self.advance()

    def skip_to_semicolon(self) -> None:
        depth = 0
        while True:
            tok = self.advance()
            if tok is None:
                return
            if tok.value == "{":
                depth += 1
            elif tok.value == "}":
                if depth == 0:
                    return
                depth -= 1
            elif tok.value == ";" and depth == 0:
                return

    # -- grammar productions

    def parse_duration(self) -> int | None:
        tok = self.peek()
        if tok is None or tok.kind != "duration":
            self.error("expected duration (e.g. 30m, 11h)" + (f", found {tok.value!r}" if tok else ""))
            return None
        self.advance()
        return int(tok.value[:-1]) * DURATION_UNITS[tok.value[-1]]

    def parse_time(self) -> tuple[int, int] | None:
        tok = self.peek()
        if tok is None or tok.kind != "time":
            self.error("expected time of day (HH:MM)" + (f", found {tok.value!r}" if tok else ""))
            return None
        self.advance()
        hh, mm = (int(p) for p in tok.value.split(":"))
        if hh > 23 or mm > 59:
            self.error(f"invalid time of day {tok.value!r}", tok)
            return None
        return hh, mm

    def parse_action(self) -> ActionSpec | None:
        tok = self.peek()
        if tok is None or tok.kind != "ident":
            self.error("expected an action" + (f", found {tok.value!r}" if tok else ""))
            return None
        if tok.value == "send":
            self.advance()
            template = self.expect_string("template id")
            return send_action(_unquote(template.value)) if template else None
        if tok.value == "schedule":
            self.advance()
            timer = self.expect_ident("timer name")
            seconds = self.parse_duration() if timer else None
            if timer is None or seconds is None:
                return None
            return schedule_action(timer.value, seconds)
        if tok.value == "cancel":
            self.advance()
            timer = self.expect_ident("timer name")
            return cancel_action(timer.value) if timer else None
        if tok.value == "metric":
            self.advance()
            name = self.expect_ident("metric name")
            return metric_action(name.value) if name else None
        if tok.value == "notify_staff":
            self.advance()
            reason = self.expect_string("reason")
            return notify_action(_unquote(reason.value)) if reason else None
        self.error(f"unknown action {tok.value!r}", tok)
        self.advance()
        return None

    def parse_trigger(self) -> Trigger | None:
        tok = self.peek()
        if tok is None or tok.kind != "ident":
            self.error("expected a trigger" + (f", found {tok.value!r}" if tok else ""))
            return None
        if tok.value == "message":
            self.advance()
            kw = self.expect_string("message keyword")
            return MessageTrigger(_unquote(kw.value).lower()) if kw else None
        if tok.value == "after":
            self.advance()
            seconds = self.parse_duration()
            return TimerTrigger("entry", seconds=seconds) if seconds is not None else None
        if tok.value == "at":
            self.advance()
            hhmm = self.parse_time()
            return TimerTrigger("clock", hh=hhmm[0], mm=hhmm[1]) if hhmm else None
        if tok.value == "tool":
            self.advance()
            tool = self.expect_ident("tool name")
            if tool is None or self.expect_punct(":") is None:
                return None
            outcome = self.expect_ident("tool outcome")
            return ToolResultTrigger(tool.value, outcome.value) if outcome else None
        if tok.value == "manual":
            self.advance()
            return ManualTrigger()
        self.error(f"unknown trigger kind {tok.value!r}", tok)
        self.advance()
        return None

    def parse_state(self, graph: ProtocolGraph, seen: dict[str, Token]) -> None:
        keyword = self.advance()  # 'state'
        name = self.expect_ident("state name")
        if name is None:
            self.skip_to_semicolon()
            return
        flags: set[str] = set()
        while self.peek() is not None and self.peek().kind == "ident" and self.peek().value in FLAGS:
            flags.add(self.advance().value)
        entry: list[ActionSpec] = []
        exits: list[ActionSpec] = []
        tok = self.peek()
        if tok is not None and tok.value == "{":
            self.advance()
            while True:
                tok = self.peek()
                if tok is None:
                    self.error("unterminated state block")
                    return
                if tok.value == "}":
                    self.advance()
                    break
                if tok.value in (";", ","):
                    self.advance()
                    continue
                is_exit = False
                if tok.kind == "ident" and tok.value == "exit":
                    self.advance()
                    is_exit = True
                action = self.parse_action()
                if action is None:
                    self.skip_to_semicolon()
                    return
                (exits if is_exit else entry).append(action)
        if self.expect_punct(";") is None:
            self.skip_to_semicolon()
        if name.value in seen:
            self.error(f"duplicate state name {name.value!r}", name)
            return
        seen[name.value] = name
        graph.states.append(
            StateDef(
                name=name.value,
                flags=frozenset(flags),
                entry_actions=tuple(entry),
                exit_actions=tuple(exits),
                line=keyword.line,
                col=keyword.col,
            )
        )

    def parse_transition(self, graph: ProtocolGraph) -> None:
        source = self.expect_ident("state name")
        if source is None or self.expect_punct("->") is None:
            self.skip_to_semicolon()
            return
        target = self.expect_ident("state name")
        if target is None or self.expect_keyword("on") is None:
            self.skip_to_semicolon()
            return
        trigger = self.parse_trigger()
        if trigger is None:
            self.skip_to_semicolon()
            return
        guard = None
        if self.at_keyword("guard"):
            self.advance()
            guard_tok = self.expect_ident("guard name")
            if guard_tok is None:
                self.skip_to_semicolon()
                return
            guard = guard_tok.value
        actions: list[ActionSpec] = []
        if self.at_keyword("do"):
            self.advance()
            while True:
                action = self.parse_action()
                if action is None:
                    self.skip_to_semicolon()
                    return
                actions.append(action)
                if self.peek() is not None and self.peek().value == ",":
                    self.advance()
                    continue
                break
        if self.expect_punct(";") is None:
            self.skip_to_semicolon()
        graph.transitions.append(
            TransitionDef(
                source=source.value,
                target=target.value,
                trigger=trigger,
                guard=guard,
                actions=tuple(actions),
                line=source.line,
                col=source.col,
            )
        )

    def parse_template(self, graph: ProtocolGraph) -> None:
        self.advance()  # 'template'
        name = self.expect_ident("template id")
        text = self.expect_string("template text") if name else None
        if name is None or text is None:
            self.skip_to_semicolon()
            return
        if self.expect_punct(";") is None:
            self.skip_to_semicolon()
        if name.value in graph.templates:
            self.error(f"duplicate template id {name.value!r}", name)
            return
        graph.templates[name.value] = _unquote(text.value)

    def parse(self) -> ProtocolGraph | None:
        if self.expect_keyword("protocol") is None:
            return None
        pid = self.expect_string("protocol id")
        if pid is None or self.expect_punct("{") is None:
            return None
        graph = ProtocolGraph(protocol_id=_unquote(pid.value))
        seen_states: dict[str, Token] = {}
        while True:
            tok = self.peek()
            if tok is None:
                self.error("unterminated protocol block: expected '}'")
                break
            if tok.value == "}":
                self.advance()
                break
            if tok.kind == "ident" and tok.value == "state":
                self.parse_state(graph, seen_states)
            elif tok.kind == "ident" and tok.value == "template":
                self.parse_template(graph)
            elif tok.kind == "ident" and tok.value not in KEYWORDS:
                self.parse_transition(graph)
            else:
                self.error(f"expected state, transition, or template, found {tok.value!r}")
                self.advance()
                self.skip_to_semicolon()
        tail = self.peek()
        if tail is not None:
            self.error(f"unexpected trailing input {tail.value!r}", tail)
        self._check_references(graph, seen_states)
        return graph

    def _check_references(self, graph: ProtocolGraph, seen: dict[str, Token]) -> None:
        declared = set(seen)
        for t in graph.transitions:
            for endpoint in (t.source, t.target):
                if endpoint not in declared:
                    self.error(f"transition references undeclared state {endpoint!r}",
                               Token("ident", endpoint, t.line, t.col))
        for s in graph.states:
            if "escalation" in s.flags and not any(
                a.kind == "notify_staff" for a in s.entry_actions
            ):
                self.warn(
                    f"escalation state {s.name!r} has no notify_staff entry action",
                    s.line, s.col,
                )


def parse_protocol(source: str) -> tuple[ProtocolGraph | None, list[CompileDiagnostic]]:
    """Parse DSL text. Returns (graph, diagnostics); graph is None when the
    source has errors."""
    tokens, diagnostics = tokenize(source)
    parser = _Parser(tokens, diagnostics)
    graph = parser.parse()
    has_errors = any(d.severity == ERROR for d in diagnostics)
    if graph is not None and not has_errors:
        graph.source = source
        return graph, diagnostics
    if not has_errors:
        diagnostics.append(CompileDiagnostic(ERROR, 1, 1, "empty or unparseable protocol"))
    return None, diagnostics


# ---------------------------------------------------------------------------
# Validation


def validate_graph(graph: ProtocolGraph) -> list[CompileDiagnostic]:
    """Graph-level checks. Empty result means the graph is compilable; warnings
    (unreachable states) do not block compilation."""
    diagnostics: list[CompileDiagnostic] = []
    names = graph.state_names()
    declared = set(names)

    dupes = {n for n in names if names.count(n) > 1}
    for name in sorted(dupes):
        s = graph.state(name)
        diagnostics.append(
            CompileDiagnostic(ERROR, s.line, s.col, f"duplicate state name {name!r}")
        )

    initials = [s for s in graph.states if s.initial]
    if not initials:
        diagnostics.append(CompileDiagnostic(ERROR, 1, 1, "protocol has no initial state"))
    elif len(initials) > 1:
        extra = initials[1]
        diagnostics.append(
            CompileDiagnostic(
                ERROR, extra.line, extra.col,
                "protocol has more than one initial state: "
                + ", ".join(s.name for s in initials),
            )
        )

    for t in graph.transitions:
        for endpoint in (t.source, t.target):
            if endpoint not in declared:
                diagnostics.append(
                    CompileDiagnostic(
                        ERROR, t.line, t.col,
                        f"transition references undeclared state {endpoint!r}",
                    )
                )

    # Ambiguity: identical (trigger, guard) pairs leaving the same state.
    seen_pairs: dict[tuple, TransitionDef] = {}
    for t in graph.transitions:
        pair = (t.source, t.trigger.key(), t.guard)
        if pair in seen_pairs:
            diagnostics.append(
                CompileDiagnostic(
                    ERROR, t.line, t.col,
                    f"ambiguous transition: {t.source!r} already has an identical "
                    f"({t.trigger.label()}, guard={t.guard}) transition",
                )
            )
        else:
            seen_pairs[pair] = t

    for s in graph.states:
        if s.terminal:
            exits = [t for t in graph.transitions if t.source == s.name]
            if exits:
                diagnostics.append(
                    CompileDiagnostic(
                        ERROR, s.line, s.col,
                        f"terminal state {s.name!r} has {len(exits)} outgoing transition(s)",
                    )
                )

    # Reachability from the initial state (warning only).
    if len(initials) == 1 and not dupes:
        reachable = {initials[0].name}
        frontier = [initials[0].name]
        adjacency: dict[str, list[str]] = {}
        for t in graph.transitions:
            adjacency.setdefault(t.source, []).append(t.target)
        while frontier:
            current = frontier.pop()
            for nxt in adjacency.get(current, []):
                if nxt in declared and nxt not in reachable:
                    reachable.add(nxt)
                    frontier.append(nxt)
        for s in graph.states:
            if s.name not in reachable:
                diagnostics.append(
                    CompileDiagnostic(
                        WARNING, s.line, s.col,
                        f"state {s.name!r} is unreachable from the initial state",
                    )
                )

    return diagnostics


# ---------------------------------------------------------------------------
# Compilation


@dataclass(frozen=True)
class CompiledTransition:
    index: int
    source: str
    target: str
    trigger: Trigger
    guard: str | None
    actions: tuple[ActionSpec, ...]
    timer_id: str | None = None  # auto-armed timer for timer triggers

    @property
    def internal(self) -> bool:
        return self.source == self.target

    def describe(self) -> str:
        guard = f" guard {self.guard}" if self.guard else ""
        return f"{self.source} -> {self.target} on {self.trigger.label()}{guard}"


@dataclass(frozen=True)
class CompiledState:
    name: str
    index: int
    flags: frozenset[str]
    entry_actions: tuple[ActionSpec, ...]
    exit_actions: tuple[ActionSpec, ...]

    @property
    def terminal(self) -> bool:
        return "terminal" in self.flags

    @property
    def escalation(self) -> bool:
        return "escalation" in self.flags


class CompiledProtocol:
    """Immutable transition tables: lookup of (state, trigger key) yields the
    candidate transitions in declaration order; guards disambiguate at runtime."""

    def __init__(
        self,
        protocol_id: str,
        version_hash: str,
        states: dict[str, CompiledState],
        initial_state: str,
        transitions: list[CompiledTransition],
        templates: dict[str, str],
        metadata: dict[str, str],
    ):
        self.protocol_id = protocol_id
        self.version_hash = version_hash
        self.states = states
        self.initial_state = initial_state
        self.transitions = transitions
        self.templates = templates
        self.metadata = metadata
        self._table: dict[tuple[str, tuple], list[CompiledTransition]] = {}
        self.state_timers: dict[str, list[CompiledTransition]] = {name: [] for name in states}
        for t in transitions:
            if isinstance(t.trigger, TimerTrigger):
                key = (t.source, ("timer", t.timer_id))
                self.state_timers[t.source].append(t)
            else:
                key = (t.source, t.trigger.key())
            self._table.setdefault(key, []).append(t)

    def lookup(self, state: str, trigger_key: tuple) -> list[CompiledTransition]:
        return self._table.get((state, trigger_key), [])

    def has_state(self, name: str) -> bool:
        return name in self.states

    def encode(self) -> bytes:
        doc = {
            "protocol_id": self.protocol_id,
            "version_hash": self.version_hash,
            "initial_state": self.initial_state,
            "states": [
                {
                    "name": s.name,
                    "index": s.index,
                    "flags": sorted(s.flags),
                    "entry": [[a.kind, list(map(list, a.args))] for a in s.entry_actions],
                    "exit": [[a.kind, list(map(list, a.args))] for a in s.exit_actions],
                }
                for s in sorted(self.states.values(), key=lambda s: s.index)
            ],
            "transitions": [
                {
                    "index": t.index,
                    "source": t.source,
                    "target": t.target,
                    "trigger": list(t.trigger.key()),
                    "guard": t.guard,
                    "actions": [[a.kind, list(map(list, a.args))] for a in t.actions],
                    "timer_id": t.timer_id,
                }
                for t in self.transitions
            ],
            "templates": self.templates,
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def compile_protocol(
    graph: ProtocolGraph, known_guards: set[str] | None = None
) -> CompiledProtocol:
    """Build the executable transition table. Raises ProtocolCompileError if
    validate_graph reports errors or (when a guard registry is given) a guard
    name is unknown."""
    diagnostics = validate_graph(graph)
    if known_guards is not None:
        for t in graph.transitions:
            if t.guard is not None and t.guard not in known_guards:
                diagnostics.append(
                    CompileDiagnostic(
                        ERROR, t.line, t.col, f"unknown guard {t.guard!r}"
                    )
                )
    errors = [d for d in diagnostics if d.severity == ERROR]
    if errors:
        raise ProtocolCompileError(errors)

    if graph.source is not None:
        hashed = normalize_source(graph.source).encode()
    else:
        hashed = graph.canonical_encoding()
    version_hash = hashlib.sha256(hashed).hexdigest()

    states = {
        s.name: CompiledState(
            name=s.name,
            index=i,
            flags=s.flags,
            entry_actions=s.entry_actions,
            exit_actions=s.exit_actions,
        )
        for i, s in enumerate(graph.states)
    }
    initial_state = next(s.name for s in graph.states if s.initial)

    timer_counts: dict[str, int] = {}
    compiled: list[CompiledTransition] = []
    for i, t in enumerate(graph.transitions):
        timer_id = None
        if isinstance(t.trigger, TimerTrigger):
            n = timer_counts.get(t.source, 0)
            timer_counts[t.source] = n + 1
            timer_id = f"@{t.source}/{n}"
        compiled.append(
            CompiledTransition(
                index=i,
                source=t.source,
                target=t.target,
                trigger=t.trigger,
                guard=t.guard,
                actions=t.actions,
                timer_id=timer_id,
            )
        )

    return CompiledProtocol(
        protocol_id=graph.protocol_id,
        version_hash=version_hash,
        states=states,
        initial_state=initial_state,
        transitions=compiled,
        templates=dict(graph.templates),
        metadata=dict(graph.metadata),
    )


# ---------------------------------------------------------------------------
# DOT export


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(graph: ProtocolGraph) -> str:
    """Render the graph in DOT. The initial state gets an entry arrow from a
    point node, terminal states a double circle, escalation states an octagon."""
    lines = [f"digraph {_dot_quote(graph.protocol_id)} {{", "  rankdir=LR;"]
    initials = [s.name for s in graph.states if s.initial]
    if initials:
        lines.append('  "__start" [shape=point];')
    for s in graph.states:
        if s.terminal:
            shape = "doublecircle"
        elif "escalation" in s.flags:
            shape = "octagon"
        else:
            shape = "circle"
        lines.append(f"  {_dot_quote(s.name)} [shape={shape}];")
    for name in initials:
        lines.append(f'  "__start" -> {_dot_quote(name)};')
    for t in graph.transitions:
        label = t.trigger.label()
        if t.guard:
            label += f" [guard {t.guard}]"
        lines.append(
            f"  {_dot_quote(t.source)} -> {_dot_quote(t.target)} "
            f"[label={_dot_quote(label)}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
