"""Abstract syntax, schema model, safety checking and rule classification.

Every value defined here is immutable except :class:`Schema`, which a peer
extends at runtime as it learns about new relations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union

Value = Union[str, int]
RelKey = tuple  # (relation name, peer name)

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

EXTENSIONAL = "ext"
INTENSIONAL = "int"


class WebdamLogError(Exception):
    pass


class SafetyError(WebdamLogError):
    """One violated safety condition; ``subject`` names the offending item."""

    def __init__(self, subject, message: str):
        super().__init__(message)
        self.subject = subject


class UnboundHeadVar(SafetyError):
    def __init__(self, var: str):
        super().__init__(var, f"head variable ${var} is not bound by a positive body literal")


class UnsafeNegation(SafetyError):
    def __init__(self, var: str):
        super().__init__(var, f"variable ${var} of a negative literal is not bound by an earlier positive literal")


class UnboundPeerVar(SafetyError):
    """A relation or peer name variable used before a positive literal binds it."""

    def __init__(self, var: str, position: str = "peer"):
        super().__init__(var, f"{position} variable ${var} is not bound by an earlier positive literal")
        self.position = position


class ArityMismatch(SafetyError):
    def __init__(self, relation: str, expected: int, got: int):
        super().__init__(relation, f"{relation} has arity {expected}, got {got} arguments")
        self.expected = expected
        self.got = got


class UnsafeRuleError(WebdamLogError):
    def __init__(self, rule: "Rule", errors: list):
        self.rule = rule
        self.errors = list(errors)
        lines = "; ".join(str(e) for e in self.errors)
        super().__init__(f"unsafe rule {rule.id or ''}: {lines}")


class UnknownRelation(WebdamLogError):
    pass


class SchemaError(WebdamLogError):
    pass


# --------------------------------------------------------------------------
# Terms, atoms, rules, facts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: Value

    def __post_init__(self):
        v = self.value
        if isinstance(v, bool) or not isinstance(v, (str, int)):
            raise TypeError(f"constants are strings or integers, got {v!r}")
        if isinstance(v, int) and not INT64_MIN <= v <= INT64_MAX:
            raise ValueError(f"integer constant {v} outside the 64-bit range")

    def __repr__(self):
        return f"Constant({self.value!r})"


@dataclass(frozen=True)
class Variable:
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("variable names are nonempty")

    def __repr__(self):
        return f"${self.name}"


Term = Union[Constant, Variable]


def const(value: Value) -> Constant:
    return Constant(value)


def var(name: str) -> Variable:
    return Variable(name.lstrip("$"))


def as_term(x) -> Term:
    """Coerce ``"$x"`` to a variable, other str/int to a constant."""
    if isinstance(x, (Constant, Variable)):
        return x
    if isinstance(x, str) and x.startswith("$"):
        return Variable(x[1:])
    return Constant(x)


@dataclass(frozen=True)
class Atom:
    relation: Term
    peer: Term
    args: tuple = ()

    @staticmethod
    def of(relation, peer, *args) -> "Atom":
        return Atom(as_term(relation), as_term(peer), tuple(as_term(a) for a in args))

    @property
    def is_ground_name(self) -> bool:
        return isinstance(self.relation, Constant) and isinstance(self.peer, Constant)

    @property
    def key(self) -> RelKey:
        """``(relation, peer)`` of an atom whose names are constants."""
        if not self.is_ground_name:
            raise ValueError(f"atom {self!r} has variable relation or peer")
        return (self.relation.value, self.peer.value)

    def name_variables(self) -> list:
        return [t.name for t in (self.relation, self.peer) if isinstance(t, Variable)]

    def variables(self) -> Iterator[str]:
        for t in (self.relation, self.peer, *self.args):
            if isinstance(t, Variable):
                yield t.name

    def arg_variables(self) -> Iterator[str]:
        for t in self.args:
            if isinstance(t, Variable):
                yield t.name


@dataclass(frozen=True)
class Literal:
    atom: Atom
    positive: bool = True

    @property
    def negative(self) -> bool:
        return not self.positive


@dataclass(frozen=True)
class Rule:
    """``head :- body``; ``id`` and ``origin`` do not take part in equality."""

    head: Atom
    body: tuple
    id: str = field(default="", compare=False)
    origin: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.body:
            raise ValueError("rule body must be nonempty")

    def variables(self) -> set:
        out = set(self.head.variables())
        for lit in self.body:
            out.update(lit.atom.variables())
        return out

    def has_name_variables(self) -> bool:
        return bool(self.head.name_variables()) or any(
            lit.atom.name_variables() for lit in self.body
        )

    def with_id(self, rule_id: str, origin: str | None = None) -> "Rule":
        return Rule(self.head, self.body, rule_id, self.origin if origin is None else origin)


@dataclass(frozen=True)
class Fact:
    relation: str
    peer: str
    values: tuple = ()

    @property
    def key(self) -> RelKey:
        return (self.relation, self.peer)

    def __post_init__(self):
        for v in self.values:
            if isinstance(v, bool) or not isinstance(v, (str, int)):
                raise TypeError(f"fact values are strings or integers, got {v!r}")


# --------------------------------------------------------------------------
# Schema
# --------------------------------------------------------------------------


class Schema:
    """Peers, extensional/intensional relations and their sorts (arities).

    Unknown relations are auto-declared on first use by :meth:`ensure`.
    """

    def __init__(self):
        self.peers: set = set()
        self.kind: dict = {}
        self.sort: dict = {}

    @property
    def extensional(self) -> set:
        return {k for k, v in self.kind.items() if v == EXTENSIONAL}

    @property
    def intensional(self) -> set:
        return {k for k, v in self.kind.items() if v == INTENSIONAL}

    def copy(self) -> "Schema":
        s = Schema()
        s.peers = set(self.peers)
        s.kind = dict(self.kind)
        s.sort = dict(self.sort)
        return s

    def declare(self, relation: str, peer: str, arity: int | None, kind: str | None = EXTENSIONAL):
        key = (relation, peer)
        if kind is not None and kind not in (EXTENSIONAL, INTENSIONAL):
            raise ValueError(f"unknown relation kind {kind!r}")
        old = self.kind.get(key)
        if kind is not None and old is not None and old != kind:
            raise SchemaError(f"{relation}@{peer} cannot be both extensional and intensional")
        if arity is not None:
            if arity < 0:
                raise ValueError("arity must be non-negative")
            have = self.sort.get(key)
            if have is not None and have != arity:
                raise ArityMismatch(f"{relation}@{peer}", have, arity)
            self.sort[key] = arity
        if kind is not None:
            self.kind[key] = kind
        elif key not in self.kind:
            self.kind[key] = EXTENSIONAL
        self.peers.add(peer)

    def ensure(self, relation: str, peer: str, arity: int, kind: str = EXTENSIONAL):
        """Check ``arity`` against the declared sort, declaring the relation if unknown."""
        key = (relation, peer)
        if key in self.sort:
            if self.sort[key] != arity:
                raise ArityMismatch(f"{relation}@{peer}", self.sort[key], arity)
            return
        self.declare(relation, peer, arity, self.kind.get(key, kind))

    def knows(self, relation: str, peer: str) -> bool:
        return (relation, peer) in self.kind

    def kind_of(self, relation: str, peer: str) -> str | None:
        return self.kind.get((relation, peer))

    def is_intensional(self, relation: str, peer: str) -> bool:
        return self.kind.get((relation, peer)) == INTENSIONAL

    def arity(self, relation: str, peer: str) -> int | None:
        return self.sort.get((relation, peer))


# --------------------------------------------------------------------------
# Safety
# --------------------------------------------------------------------------


def safety_errors(rule: Rule, schema: Schema | None = None) -> list:
    """Every violated safety condition of ``rule``, in body order."""
    errors: list = []
    bound: set = set()
    positive_vars: set = set()
    for lit in rule.body:
        if lit.positive:
            positive_vars.update(lit.atom.variables())

    for lit in rule.body:
        atom = lit.atom
        for pos, term in (("relation", atom.relation), ("peer", atom.peer)):
            if isinstance(term, Variable) and term.name not in bound:
                errors.append(UnboundPeerVar(term.name, pos))
        if lit.positive:
            bound.update(atom.variables())
        else:
            for name in dict.fromkeys(atom.arg_variables()):
                if name not in bound:
                    errors.append(UnsafeNegation(name))

    seen: set = set()
    for name in rule.head.variables():
        if name not in positive_vars and name not in seen:
            seen.add(name)
            errors.append(UnboundHeadVar(name))

    if schema is not None:
        for atom in (rule.head, *(lit.atom for lit in rule.body)):
            if atom.is_ground_name:
                arity = schema.arity(*atom.key)
                if arity is not None and arity != len(atom.args):
                    errors.append(ArityMismatch(f"{atom.key[0]}@{atom.key[1]}", arity, len(atom.args)))
    return errors


def validate_rule(rule: Rule, schema: Schema | None = None) -> Rule:
    """Return ``rule`` if it is safe, else raise :class:`UnsafeRuleError`."""
    errors = safety_errors(rule, schema)
    if errors:
        raise UnsafeRuleError(rule, errors)
    return rule


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------


class RuleClass(enum.Enum):
    A = "local body, local intensional head"
    B = "local body, local extensional head"
    C = "local body, non-local extensional head"
    D = "local body, non-local intensional head"
    E = "non-local body"
    F = "relation or peer variables"


def head_kind(schema: Schema, relation: str, peer: str, auto_declare: bool = True) -> str:
    kind = schema.kind_of(relation, peer)
    if kind is None:
        if not auto_declare:
            raise UnknownRelation(f"{relation}@{peer} is not declared")
        return EXTENSIONAL
    return kind


def classify_rule(rule: Rule, at_peer: str, schema: Schema, auto_declare: bool = True) -> RuleClass:
    if rule.has_name_variables():
        return RuleClass.F
    if any(lit.atom.peer.value != at_peer for lit in rule.body):
        return RuleClass.E
    rel, peer = rule.head.key
    intensional = head_kind(schema, rel, peer, auto_declare) == INTENSIONAL
    if peer != at_peer:
        return RuleClass.D if intensional else RuleClass.C
    return RuleClass.A if intensional else RuleClass.B


# --------------------------------------------------------------------------
# Substitution
# --------------------------------------------------------------------------


def _subst_term(term: Term, bindings: Mapping) -> Term:
    if isinstance(term, Variable) and term.name in bindings:
        value = bindings[term.name]
        return value if isinstance(value, Constant) else Constant(value)
    return term


def substitute_atom(atom: Atom, bindings: Mapping) -> Atom:
    return Atom(
        _subst_term(atom.relation, bindings),
        _subst_term(atom.peer, bindings),
        tuple(_subst_term(t, bindings) for t in atom.args),
    )


def substitute(rule: Rule, bindings: Mapping, derivation: str | None = None) -> Rule:
    """Replace bound variables by constants; ``derivation`` is appended to the id."""
    bindings = {k.lstrip("$") if isinstance(k, str) else k.name: v for k, v in bindings.items()}
    head = substitute_atom(rule.head, bindings)
    body = tuple(Literal(substitute_atom(l.atom, bindings), l.positive) for l in rule.body)
    rule_id = rule.id + derivation if derivation else rule.id
    return Rule(head, body, rule_id, rule.origin)


def body_atoms(rule: Rule) -> Iterable[Atom]:
    return (lit.atom for lit in rule.body)
