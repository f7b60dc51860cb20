"""Flattened dictionary-literal semantics strings: canonical serialization and
a tolerant parser.

Canonical form (byte-exact):

    {'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time', 'filler': 'five am'}]}

The parser is total: any byte string yields a SemanticsRecord. Unrecoverable
syntax errors give the empty record (scenario/action "none", no entities);
missing or wrong-shaped scenario/action values become "none"; a malformed
entity inside an otherwise well-delimited list is dropped while its
well-formed siblings survive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_IDENT_RE = re.compile(r"[^a-z0-9_]+")

NONE_VALUE = "none"


def normalize_ident(s: str) -> str:
    """Lowercase identifier over [a-z0-9_]; empty results collapse to "none"."""
    s = _IDENT_RE.sub("_", str(s).strip().lower()).strip("_")
    return s if s else NONE_VALUE


@dataclass(frozen=True)
class Entity:
    type: str
    filler: str

    def __post_init__(self):
        object.__setattr__(self, "type", normalize_ident(self.type))
        object.__setattr__(self, "filler", str(self.filler))


@dataclass(frozen=True)
class SemanticsRecord:
    scenario: str
    action: str
    entities: tuple[Entity, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "scenario", normalize_ident(self.scenario))
        object.__setattr__(self, "action", normalize_ident(self.action))
        object.__setattr__(self, "entities", tuple(self.entities))

    @property
    def intent(self) -> tuple[str, str]:
        return (self.scenario, self.action)


EMPTY_RECORD = SemanticsRecord(NONE_VALUE, NONE_VALUE, ())


def _quote(s: str) -> str:
    return "'" + s.replace("\\", "\\\\").replace("'", "\\'") + "'"


def flatten(r: SemanticsRecord) -> str:
    ents = ", ".join(
        "{" + f"{_quote('type')}: {_quote(e.type)}, {_quote('filler')}: {_quote(e.filler)}" + "}"
        for e in r.entities
    )
    return (
        "{" + f"{_quote('scenario')}: {_quote(r.scenario)}, "
        f"{_quote('action')}: {_quote(r.action)}, "
        f"{_quote('entities')}: [{ents}]" + "}"
    )


class _ParseFail(Exception):
    pass


class _Reader:
    """Recursive-descent reader over the brace/bracket/quote grammar.

    Tolerates flexible whitespace, trailing commas, double quotes, unquoted
    bare words, and unknown keys. Structural breakage raises _ParseFail.
    """

    def __init__(self, text: str):
        self.s = text
        self.i = 0
        self.n = len(text)

    def skip_ws(self):
        while self.i < self.n and self.s[self.i].isspace():
            self.i += 1

    def peek(self) -> str:
        return self.s[self.i] if self.i < self.n else ""

    def expect(self, ch: str):
        self.skip_ws()
        if self.peek() != ch:
            raise _ParseFail(f"expected {ch!r} at {self.i}")
        self.i += 1

    def read_string(self) -> str:
        quote = self.peek()
        self.i += 1
        out = []
        while True:
            if self.i >= self.n:
                raise _ParseFail("unterminated string")
            c = self.s[self.i]
            if c == "\\" and self.i + 1 < self.n:
                out.append(self.s[self.i + 1])
                self.i += 2
                continue
            if c == quote:
                self.i += 1
                return "".join(out)
            out.append(c)
            self.i += 1

    def read_bare(self) -> str:
        start = self.i
        while self.i < self.n and self.s[self.i] not in ",:{}[]'\"" and not self.s[self.i].isspace():
            self.i += 1
        if self.i == start:
            raise _ParseFail(f"no value at {self.i}")
        return self.s[start : self.i]

    def read_value(self):
        self.skip_ws()
        c = self.peek()
        if c in "'\"":
            return self.read_string()
        if c == "{":
            return self.read_object()
        if c == "[":
            return self.read_list()
        return self.read_bare()

    def read_object(self) -> dict:
        self.expect("{")
        obj: dict = {}
        while True:
            self.skip_ws()
            if self.peek() == "}":
                self.i += 1
                return obj
            if self.peek() == ",":
                self.i += 1
                continue
            if self.peek() == "":
                raise _ParseFail("unterminated object")
            key = self.read_value()
            self.skip_ws()
            if self.peek() != ":":
                raise _ParseFail(f"expected ':' at {self.i}")
            self.i += 1
            val = self.read_value()
            if isinstance(key, str) and key not in obj:
                obj[key] = val

    def read_list(self) -> list:
        self.expect("[")
        items: list = []
        while True:
            self.skip_ws()
            if self.peek() == "]":
                self.i += 1
                return items
            if self.peek() == ",":
                self.i += 1
                continue
            if self.peek() == "":
                raise _ParseFail("unterminated list")
            items.append(self.read_value())


def parse(text: str) -> SemanticsRecord:
    """Parse arbitrary text into a SemanticsRecord; never raises."""
    if not isinstance(text, str):
        try:
            text = str(text)
        except Exception:
            return EMPTY_RECORD
    rd = _Reader(text)
    try:
        rd.skip_ws()
        if rd.peek() != "{":
            raise _ParseFail("no object")
        obj = rd.read_object()
    except _ParseFail:
        return EMPTY_RECORD
    except RecursionError:
        return EMPTY_RECORD

    scenario = obj.get("scenario")
    action = obj.get("action")
    scenario = normalize_ident(scenario) if isinstance(scenario, str) else NONE_VALUE
    action = normalize_ident(action) if isinstance(action, str) else NONE_VALUE

    entities: list[Entity] = []
    raw_entities = obj.get("entities")
    if isinstance(raw_entities, list):
        for item in raw_entities:
            if not isinstance(item, dict):
                continue
            etype = item.get("type")
            filler = item.get("filler")
            if isinstance(etype, str) and isinstance(filler, str):
                entities.append(Entity(etype, filler))
    return SemanticsRecord(scenario, action, tuple(entities))


def canonicalize(text: str) -> str:
    """flatten(parse(text)); idempotent by construction."""
    return flatten(parse(text))
