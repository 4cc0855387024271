"""Concrete syntax for programs, rules, facts and declarations.

Grammar::

    program   := (decl | schema | header | stmt)*
    decl      := ("ext" | "int") relname "@" peername "/" arity
    schema    := "schema:" signature+            (to end of line; indented
                                                  lines continue it)
    signature := relname ("@" peername)? "(" ident ("," ident)* ")"
    header    := "[" "rule"? "at" peername "]"
    stmt      := atom (":-" literal ("," literal)*)?
    literal   := "not"? atom
    atom      := relterm "@" peerterm "(" (term ("," term)*)? ")"
    term      := "$" ident | integer | quoted-string | ident

``//`` starts a comment. A comma may be omitted before ``not``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .syntax import (
    EXTENSIONAL,
    INT64_MAX,
    INT64_MIN,
    INTENSIONAL,
    Atom,
    Constant,
    Fact,
    Literal,
    Rule,
    Variable,
    WebdamLogError,
)

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
PEER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(?:[.:][A-Za-z0-9_]+)*")
INT_RE = re.compile(r"-?[0-9]+")
_WS_RE = re.compile(r"(?:\s+|//[^\n]*)+")
_KEYWORDS = {"not"}


class ParseError(WebdamLogError):
    def __init__(self, message: str, line: int, column: int, expected=()):
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        detail = f"; expected one of {', '.join(self.expected)}" if self.expected else ""
        super().__init__(f"line {line}, column {column}: {message}{detail}")


@dataclass(frozen=True)
class Declaration:
    relation: str
    peer: str | None  # None: the same relation name at every peer
    arity: int
    kind: str | None  # None when only the sort is given (``schema:`` lines)

    def render(self) -> str:
        if self.peer is None or self.kind is None:
            cols = ", ".join(f"c{i}" for i in range(self.arity))
            at = f"@{self.peer}" if self.peer is not None else ""
            return f"schema: {self.relation}{at}({cols})"
        return f"{self.kind} {self.relation}@{self.peer}/{self.arity}"


@dataclass(frozen=True)
class Statement:
    peer: str | None
    item: object  # Rule | Fact


@dataclass
class SourceProgram:
    declarations: list = field(default_factory=list)
    statements: list = field(default_factory=list)
    default_peer: str | None = None

    @property
    def rules(self) -> list:
        return [s.item for s in self.statements if isinstance(s.item, Rule)]

    @property
    def facts(self) -> list:
        return [s.item for s in self.statements if isinstance(s.item, Fact)]


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    # -- low level --------------------------------------------------------

    def where(self, pos=None):
        pos = self.pos if pos is None else pos
        line = self.text.count("\n", 0, pos) + 1
        col = pos - (self.text.rfind("\n", 0, pos) + 1) + 1
        return line, col

    def fail(self, message, expected=(), pos=None):
        line, col = self.where(pos)
        raise ParseError(message, line, col, expected)

    def skip(self):
        m = _WS_RE.match(self.text, self.pos)
        if m:
            self.pos = m.end()

    def skip_inline(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r":
            self.pos += 1
        if self.text.startswith("//", self.pos):
            end = self.text.find("\n", self.pos)
            self.pos = len(self.text) if end < 0 else end

    def at_end(self):
        self.skip()
        return self.pos >= len(self.text)

    def peek(self, s: str) -> bool:
        self.skip()
        return self.text.startswith(s, self.pos)

    def accept(self, s: str) -> bool:
        if self.peek(s):
            self.pos += len(s)
            return True
        return False

    def expect(self, s: str):
        if not self.accept(s):
            found = self.text[self.pos:self.pos + 1] or "end of input"
            self.fail(f"unexpected {found!r}", [repr(s)])

    def regex(self, rx, what):
        self.skip()
        m = rx.match(self.text, self.pos)
        if not m:
            found = self.text[self.pos:self.pos + 1] or "end of input"
            self.fail(f"unexpected {found!r}", [what])
        self.pos = m.end()
        return m.group(0)

    def peek_keyword(self, word: str) -> bool:
        self.skip()
        m = IDENT_RE.match(self.text, self.pos)
        if not m or m.group(0) != word:
            return False
        rest = self.text[m.end():]
        return not rest.lstrip().startswith("@")

    # -- grammar ----------------------------------------------------------

    def program(self, default_peer):
        prog = SourceProgram(default_peer=default_peer)
        current = default_peer
        while not self.at_end():
            if self.peek("["):
                current = self.header()
                if prog.default_peer is None:
                    prog.default_peer = current
            elif self.peek_keyword("ext") or self.peek_keyword("int"):
                prog.declarations.append(self.decl())
            elif self.peek("schema:"):
                prog.declarations.extend(self.schema_line())
            else:
                item = self.statement(current)
                prog.statements.append(Statement(current, item))
        return prog

    def header(self):
        self.expect("[")
        if self.peek_keyword("rule"):
            self.regex(IDENT_RE, "rule")
        word = self.regex(IDENT_RE, "at")
        if word != "at":
            self.fail(f"unexpected {word!r}", ["at"])
        peer = self.regex(PEER_RE, "peer name")
        self.expect("]")
        return peer

    def decl(self):
        kind = EXTENSIONAL if self.regex(IDENT_RE, "ext") == "ext" else INTENSIONAL
        rel = self.regex(IDENT_RE, "relation name")
        self.expect("@")
        peer = self.regex(PEER_RE, "peer name")
        self.expect("/")
        arity = int(self.regex(re.compile(r"[0-9]+"), "arity"))
        return Declaration(rel, peer, arity, kind)

    def schema_line(self):
        self.expect("schema:")
        out = []
        while True:
            self.skip_inline()
            if self.pos >= len(self.text):
                break
            if self.text[self.pos] == "\n":
                # indented non-blank lines continue the schema block
                nxt = self.text[self.pos + 1:].split("\n", 1)[0]
                if nxt[:1] in (" ", "\t") and nxt.strip() and not nxt.strip().startswith("//"):
                    self.pos += 1
                    continue
                break
            rel = self.regex(IDENT_RE, "relation name")
            peer = None
            if self.accept("@"):
                peer = self.regex(PEER_RE, "peer name")
            self.expect("(")
            cols = 0
            if not self.peek(")"):
                while True:
                    self.regex(IDENT_RE, "column name")
                    cols += 1
                    if not self.accept(","):
                        break
            self.expect(")")
            out.append(Declaration(rel, peer, cols, None))
        if not out:
            self.fail("empty schema line", ["relation signature"])
        return out

    def statement(self, origin):
        start = self.pos
        head = self.atom()
        if not self.accept(":-"):
            if not head.is_ground_name or any(isinstance(t, Variable) for t in head.args):
                self.fail("a fact must be ground", [":-"], pos=start)
            return Fact(head.relation.value, head.peer.value, tuple(t.value for t in head.args))
        body = [self.literal()]
        while True:
            if self.accept(","):
                body.append(self.literal())
            elif self.peek_keyword("not"):
                body.append(self.literal())
            else:
                break
        return Rule(head, tuple(body), origin=origin or "")

    def literal(self):
        positive = True
        if self.peek_keyword("not"):
            self.regex(IDENT_RE, "not")
            positive = False
        return Literal(self.atom(), positive)

    def name_term(self, rx, what):
        self.skip()
        if self.accept("$"):
            return Variable(self.regex(IDENT_RE, "variable name"))
        return Constant(self.regex(rx, what))

    def atom(self):
        self.skip()
        start = self.pos
        rel = self.name_term(IDENT_RE, "relation name")
        if isinstance(rel, Constant) and rel.value in _KEYWORDS and not self.peek("@"):
            self.fail("unexpected keyword 'not'", ["relation name"], pos=start)
        self.expect("@")
        peer = self.name_term(PEER_RE, "peer name")
        self.expect("(")
        args = []
        if not self.accept(")"):
            while True:
                args.append(self.term())
                if self.accept(")"):
                    break
                if not self.accept(","):
                    self.fail("unexpected token in argument list", ["','", "')'"])
        return Atom(rel, peer, tuple(args))

    def term(self):
        self.skip()
        c = self.text[self.pos:self.pos + 1]
        if c == "$":
            self.pos += 1
            return Variable(self.regex(IDENT_RE, "variable name"))
        if c == '"':
            return Constant(self.string())
        m = INT_RE.match(self.text, self.pos)
        if m:
            value = int(m.group(0))
            if not INT64_MIN <= value <= INT64_MAX:
                self.fail("integer out of 64-bit range")
            self.pos = m.end()
            return Constant(value)
        m = IDENT_RE.match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return Constant(m.group(0))
        self.fail(f"unexpected {c or 'end of input'!r}", ["variable", "integer", "string", "identifier"])

    def string(self):
        start = self.pos
        self.pos += 1
        out = []
        text = self.text
        while True:
            if self.pos >= len(text):
                self.fail("unterminated string", ['\'"\''], pos=start)
            c = text[self.pos]
            if c == '"':
                self.pos += 1
                return "".join(out)
            if c == "\\":
                nxt = text[self.pos + 1:self.pos + 2]
                if nxt not in ('"', "\\"):
                    self.fail("invalid escape", ['\\"', "\\\\"])
                out.append(nxt)
                self.pos += 2
                continue
            out.append(c)
            self.pos += 1


def parse_program(text: str, default_peer: str | None = None) -> SourceProgram:
    return _Parser(text).program(default_peer)


def _single(text: str, origin: str | None, kind):
    p = _Parser(text)
    item = p.statement(origin)
    if not p.at_end():
        p.fail("trailing input", ["end of input"])
    if not isinstance(item, kind):
        p.fail(f"expected a {kind.__name__.lower()}", pos=0)
    return item


def parse_rule(text: str, origin: str | None = None) -> Rule:
    return _single(text, origin, Rule)


def parse_fact(text: str) -> Fact:
    return _single(text, None, Fact)


def parse_declaration(text: str) -> Declaration:
    p = _Parser(text)
    decls = p.schema_line() if p.peek("schema:") else [p.decl()]
    if not p.at_end() or len(decls) != 1:
        p.fail("trailing input", ["end of input"])
    return decls[0]


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def render_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_value(v) -> str:
    return str(v) if isinstance(v, int) else render_string(v)


def _render_name(term, rx) -> str:
    if isinstance(term, Variable):
        return f"${term.name}"
    v = term.value
    if not isinstance(v, str) or not rx.fullmatch(v):
        raise ValueError(f"{v!r} cannot be used as a relation or peer name")
    return v


def render_term(term) -> str:
    if isinstance(term, Variable):
        return f"${term.name}"
    return render_value(term.value)


def render_atom(atom: Atom) -> str:
    args = ", ".join(render_term(t) for t in atom.args)
    return f"{_render_name(atom.relation, IDENT_RE)}@{_render_name(atom.peer, PEER_RE)}({args})"


def render_literal(lit: Literal) -> str:
    return render_atom(lit.atom) if lit.positive else "not " + render_atom(lit.atom)


def render(item) -> str:
    """Canonical text of a rule or fact; ``parse(render(x)) == x``."""
    if isinstance(item, Fact):
        rel = _render_name(Constant(item.relation), IDENT_RE)
        peer = _render_name(Constant(item.peer), PEER_RE)
        return f"{rel}@{peer}({', '.join(render_value(v) for v in item.values)})"
    if isinstance(item, Rule):
        return render_atom(item.head) + " :- " + ", ".join(render_literal(l) for l in item.body)
    if isinstance(item, Declaration):
        return item.render()
    raise TypeError(f"cannot render {type(item).__name__}")


def is_name(value) -> bool:
    """Whether ``value`` can appear as a relation name."""
    return isinstance(value, str) and bool(IDENT_RE.fullmatch(value))


def is_peer_name(value) -> bool:
    return isinstance(value, str) and bool(PEER_RE.fullmatch(value))
