"""Plan action language: action types, parser, serializer and prompt assembly.

Grammar (one ``PLAN`` line per agent, trailing prose ignored)::

    response  = { ignorable-line } , plan-line , { plan-line | ignorable-line } ;
    plan-line = "PLAN" , agent-id , ":" , action , { "->" , action } ;
    action    = "PICK" obj [ "HANDLE" id | "OFFSET" number ]
              | "PLACE" obj "AT" pose | "MOVE" "TO" pose | "TWIST" number
              | "OPEN" | "CLOSE" | "WAIT" ;
    pose      = "(" number "," number "," number [ "," number ] ")" ;
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

from reflex.errors import DuplicateAgent, ParseError, UnknownVerb
from reflex.geometry import Pose

if TYPE_CHECKING:
    from reflex.metacog import MetaInput
    from reflex.world import Observation

VERBS = ("PICK", "PLACE", "MOVE", "TWIST", "OPEN", "CLOSE", "WAIT")

GRAMMAR = __doc__.split("::", 1)[1].strip("\n").rstrip() + "\n"


@dataclass(frozen=True)
class Pick:
    object_id: str
    handle: str | None = None
    offset: float | None = None

    def __post_init__(self) -> None:
        if self.handle is not None and self.offset is not None:
            raise ValueError("PICK takes either a handle or an offset, not both")
        if self.offset is not None and (not math.isfinite(self.offset) or self.offset < 0):
            raise ValueError(f"grasp offset must be a finite non-negative length, got {self.offset}")


@dataclass(frozen=True)
class Place:
    object_id: str
    at: Pose


@dataclass(frozen=True)
class Move:
    to: Pose


@dataclass(frozen=True)
class Twist:
    degrees: float

    def __post_init__(self) -> None:
        if not (-180.0 <= self.degrees <= 180.0):
            raise ValueError(f"TWIST degrees must lie in [-180, 180], got {self.degrees}")


@dataclass(frozen=True)
class Open:
    pass


@dataclass(frozen=True)
class Close:
    pass


@dataclass(frozen=True)
class Wait:
    pass


Action = Union[Pick, Place, Move, Twist, Open, Close, Wait]


@dataclass(frozen=True)
class AgentPlan:
    agent_id: str
    actions: tuple[Action, ...]

    def __post_init__(self) -> None:
        if not self.actions:
            raise ValueError(f"plan for {self.agent_id} has no actions")


@dataclass(frozen=True)
class JointPlan:
    """Step-aligned plans; action k of every agent runs in environment step k."""

    plans: dict[str, AgentPlan]

    @property
    def agents(self) -> list[str]:
        return sorted(self.plans)

    def __len__(self) -> int:
        return max((len(p.actions) for p in self.plans.values()), default=0)

    def step(self, k: int) -> dict[str, Action]:
        return {a: p.actions[k] if k < len(p.actions) else Wait() for a, p in self.plans.items()}

    def padded(self) -> JointPlan:
        n = len(self)
        return JointPlan(
            {
                a: AgentPlan(a, p.actions + (Wait(),) * (n - len(p.actions)))
                for a, p in self.plans.items()
            }
        )


# --------------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<arrow>->)|(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)|(?P<punct>[():,]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(line: str, lineno: int) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    n = len(line)
    while pos < n:
        if line[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(line, pos)
        if m is None or m.end() == pos:
            raise ParseError(lineno, pos + 1, "token", f"unexpected character {line[pos]!r}")
        kind = m.lastgroup or "punct"
        start = m.start(kind)
        text = m.group(kind)
        # identifiers may swallow a trailing "-" of an arrow ("a->b")
        if kind == "ident" and "->" in text:
            text = text[: text.index("->")]
        toks.append(_Tok(kind, text, start + 1))
        pos = start + len(text)
    return toks


class _Cursor:
    def __init__(self, toks: list[_Tok], lineno: int, line_len: int) -> None:
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.eol_col = line_len + 1

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def col(self) -> int:
        t = self.peek()
        return t.col if t else self.eol_col

    def fail(self, expected: str) -> ParseError:
        t = self.peek()
        got = f"found {t.text!r}" if t else "found end of line"
        return ParseError(self.lineno, self.col(), expected, f"expected {expected}, {got}")

    def take(self, kind: str, text: str | None = None, expected: str | None = None) -> _Tok:
        t = self.peek()
        if t is None or t.kind != kind or (text is not None and t.text != text):
            raise self.fail(expected or (text or kind))
        self.i += 1
        return t

    def accept(self, kind: str, text: str | None = None) -> bool:
        t = self.peek()
        if t is not None and t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return True
        return False

    def number(self) -> float:
        t = self.take("num", expected="number")
        v = float(t.text)
        if not math.isfinite(v):
            raise ParseError(self.lineno, t.col, "finite number")
        return v

    def pose(self) -> Pose:
        self.take("punct", "(", "'('")
        vals = [self.number()]
        while self.accept("punct", ","):
            vals.append(self.number())
        if len(vals) not in (3, 4):
            raise self.fail("pose with 3 or 4 components")
        self.take("punct", ")", "')'")
        return Pose(*vals)


def _parse_action(cur: _Cursor) -> Action:
    t = cur.peek()
    if t is None or t.kind != "ident":
        raise cur.fail("action verb")
    verb = t.text
    if verb not in VERBS:
        raise UnknownVerb(verb, cur.lineno, t.col)
    cur.i += 1
    if verb == "PICK":
        obj = cur.take("ident", expected="object id").text
        if cur.accept("ident", "HANDLE"):
            return Pick(obj, handle=cur.take("ident", expected="handle id").text)
        if cur.accept("ident", "OFFSET"):
            col = cur.col()
            v = cur.number()
            if v < 0:
                raise ParseError(cur.lineno, col, "non-negative offset")
            return Pick(obj, offset=v)
        return Pick(obj)
    if verb == "PLACE":
        obj = cur.take("ident", expected="object id").text
        cur.take("ident", "AT", "'AT'")
        return Place(obj, cur.pose())
    if verb == "MOVE":
        cur.take("ident", "TO", "'TO'")
        return Move(cur.pose())
    if verb == "TWIST":
        col = cur.col()
        v = cur.number()
        if not -180.0 <= v <= 180.0:
            raise ParseError(cur.lineno, col, "degrees in [-180, 180]")
        return Twist(v)
    return {"OPEN": Open, "CLOSE": Close, "WAIT": Wait}[verb]()


def _parse_plan_line(line: str, lineno: int) -> AgentPlan:
    cur = _Cursor(_tokenize(line, lineno), lineno, len(line))
    cur.take("ident", "PLAN", "'PLAN'")
    agent = cur.take("ident", expected="agent id").text
    cur.take("punct", ":", "':'")
    actions = [_parse_action(cur)]
    while cur.accept("arrow"):
        actions.append(_parse_action(cur))
    if cur.peek() is not None:
        raise cur.fail("'->' or end of line")
    return AgentPlan(agent, tuple(actions))


_PLAN_LINE = re.compile(r"^\s*PLAN\b")


def parse_plan(text: str) -> JointPlan:
    """Parse a backend response into a WAIT-padded JointPlan.

    Lines not starting with ``PLAN`` are ignored; at least one plan line is required.
    """
    plans: dict[str, AgentPlan] = {}
    lines = text.splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not _PLAN_LINE.match(line):
            continue
        ap = _parse_plan_line(line, lineno)
        if ap.agent_id in plans:
            raise DuplicateAgent(ap.agent_id, lineno, line.index(ap.agent_id) + 1)
        plans[ap.agent_id] = ap
    if not plans:
        raise ParseError(max(len(lines), 1), 1, "at least one PLAN line", "no PLAN line found")
    return JointPlan(plans).padded()


# ---------------------------------------------------------------------- serializer


def _num(v: float) -> str:
    s = repr(float(v))
    return "0.0" if s == "-0.0" else s


def format_pose(p: Pose) -> str:
    return f"({_num(p.x)},{_num(p.y)},{_num(p.z)},{_num(p.yaw)})"


def format_action(a: Action) -> str:
    if isinstance(a, Pick):
        if a.handle is not None:
            return f"PICK {a.object_id} HANDLE {a.handle}"
        if a.offset is not None:
            return f"PICK {a.object_id} OFFSET {_num(a.offset)}"
        return f"PICK {a.object_id}"
    if isinstance(a, Place):
        return f"PLACE {a.object_id} AT {format_pose(a.at)}"
    if isinstance(a, Move):
        return f"MOVE TO {format_pose(a.to)}"
    if isinstance(a, Twist):
        return f"TWIST {_num(a.degrees)}"
    return type(a).__name__.upper()


def serialize_plan(plan: JointPlan) -> str:
    """Canonical text: agents sorted by id, every line padded to the same length."""
    if not plan.plans:
        raise ValueError("cannot serialize a plan with no agents")
    padded = plan.padded()
    lines = [
        f"PLAN {a}: " + " -> ".join(format_action(x) for x in padded.plans[a].actions)
        for a in padded.agents
    ]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------------- prompts

FORMAT_INSTRUCTION = (
    "Respond only with PLAN lines, one per agent, following this grammar. "
    "Actions at the same position run in the same environment step.\n"
)


@dataclass(frozen=True)
class PromptBundle:
    agent_id: str
    sections: tuple[tuple[str, str], ...]

    @property
    def rendered(self) -> str:
        return "".join(f"[{label}]\n{text.rstrip()}\n\n" for label, text in self.sections).rstrip() + "\n"


def _f3(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def render_observation(o: Observation) -> str:
    lines = [f"agent {o.agent_id} (step {o.step_count}, reach {_f3(o.reachable_radius)} m)"]
    if not o.visible_objects:
        lines.append("no visible objects")
    for oid, pose, kind in sorted(o.visible_objects, key=lambda v: v[0]):
        lines.append(f"{oid} {kind} at ({_f3(pose.x)},{_f3(pose.y)},{_f3(pose.z)},{_f3(pose.yaw)})")
    j = o.own_arm.joints
    held = o.own_arm.held.object_id if o.own_arm.held else "nothing"
    lines.append(f"joints ({_f3(j[0])},{_f3(j[1])},{_f3(j[2])}) gripper {o.own_arm.gripper} holding {held}")
    return "\n".join(lines) + "\n"


def format_section() -> str:
    return FORMAT_INSTRUCTION + GRAMMAR


def render_prompt(goal: str, observation: Observation, meta: MetaInput) -> PromptBundle:
    from reflex.metacog import render_meta

    return PromptBundle(
        observation.agent_id,
        (
            ("GOAL", goal),
            ("OBSERVATION", render_observation(observation)),
            ("META", render_meta(meta)),
            ("FORMAT", format_section()),
        ),
    )
