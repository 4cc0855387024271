"""Rule rewritings that make every installed rule local.

* :func:`split_nonlocal` evaluates the local prefix of a rule and ships the
  rest, together with an intermediate ``mid`` relation, to the peer owning
  the first non-local atom.
* :func:`rewrite_view_delegation` materialises a remote intensional head
  through one auxiliary relation per source peer.
* :func:`instantiate_deferred` replaces relation and peer variables by the
  values bound by an evaluable prefix.

All functions are pure; :class:`DelegationRegistry` keeps the per-rule
record of instantiations needed to retract delegations later.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .parser import is_name, is_peer_name
from .syntax import (
    EXTENSIONAL,
    Atom,
    Constant,
    Literal,
    Rule,
    Schema,
    Variable,
    WebdamLogError,
    substitute,
)

_UNSAFE = re.compile(r"[^A-Za-z0-9_]")


class RewriteError(WebdamLogError):
    pass


class NotClassE(RewriteError):
    pass


class NotClassD(RewriteError):
    pass


class UngroundPeer(RewriteError):
    pass


class UnknownRule(RewriteError):
    pass


def sanitize(text: str) -> str:
    return _UNSAFE.sub("_", text)


@dataclass(frozen=True)
class DelegationId:
    original_rule: str
    delegator: str
    target: str
    split_position: int

    @property
    def name(self) -> str:
        parts = (self.original_rule, self.delegator, self.target, str(self.split_position))
        return "mid_" + "_".join(sanitize(p) for p in parts)

    def __str__(self):
        return self.name


@dataclass
class RewriteOutput:
    local_rules: list = field(default_factory=list)
    delegations: dict = field(default_factory=dict)   # target -> [(delegation id, rule)]
    new_relations: list = field(default_factory=list)  # (relation, peer, arity, kind)


def _is_local(atom: Atom, at_peer: str) -> bool:
    return atom.is_ground_name and atom.peer.value == at_peer


def first_nonlocal(rule: Rule, at_peer: str) -> int | None:
    """Index of the first body literal not evaluable at ``at_peer`` as is."""
    for i, lit in enumerate(rule.body):
        if not _is_local(lit.atom, at_peer):
            return i
    return None


def _ordered_vars(literals) -> list:
    seen = {}
    for lit in literals:
        for v in lit.atom.variables():
            seen.setdefault(v, None)
    return list(seen)


def carried_variables(rule: Rule, split: int) -> list:
    """Variables of ``body[:split]`` needed by ``body[split:]`` or the head."""
    later = set(rule.head.variables())
    for lit in rule.body[split:]:
        later.update(lit.atom.variables())
    return [v for v in _ordered_vars(rule.body[:split]) if v in later]


def split_nonlocal(rule: Rule, at_peer: str) -> RewriteOutput:
    i = first_nonlocal(rule, at_peer)
    if i is None:
        raise NotClassE(f"rule {rule.id} is local at {at_peer}")
    atom = rule.body[i].atom
    if isinstance(atom.peer, Variable):
        raise UngroundPeer(f"peer ${atom.peer.name} of atom {i + 1} must be instantiated first")
    target = atom.peer.value
    if target == at_peer:
        raise NotClassE(f"atom {i + 1} of rule {rule.id} is local; its relation needs instantiation")
    did = DelegationId(rule.id, at_peer, target, i + 1)
    out = RewriteOutput()
    if i == 0:
        out.delegations[target] = [(did, Rule(rule.head, rule.body, did.name, at_peer))]
        return out
    carried = carried_variables(rule, i)
    mid = Atom(Constant(did.name), Constant(target), tuple(Variable(v) for v in carried))
    out.local_rules.append(Rule(mid, rule.body[:i], f"{rule.id}/mid", at_peer))
    shipped = Rule(rule.head, (Literal(mid),) + tuple(rule.body[i:]), did.name, at_peer)
    out.delegations[target] = [(did, shipped)]
    out.new_relations.append((did.name, target, len(carried), EXTENSIONAL))
    return out


def aux_relation(head_relation: str, source_peer: str) -> str:
    return f"aux_{sanitize(head_relation)}_{sanitize(source_peer)}"


def rewrite_view_delegation(rule: Rule, at_peer: str, schema: Schema | None = None) -> RewriteOutput:
    if first_nonlocal(rule, at_peer) is not None or not rule.head.is_ground_name:
        raise NotClassD(f"rule {rule.id} is not local with a ground head at {at_peer}")
    rel, target = rule.head.key
    if target == at_peer:
        raise NotClassD(f"head of rule {rule.id} is local")
    if schema is not None and schema.kind_of(rel, target) == EXTENSIONAL:
        raise NotClassD(f"{rel}@{target} is extensional")
    aux = aux_relation(rel, at_peer)
    arity = len(rule.head.args)
    out = RewriteOutput()
    out.local_rules.append(
        Rule(Atom(Constant(aux), Constant(target), rule.head.args), rule.body, f"{rule.id}/aux", at_peer)
    )
    cols = tuple(Variable(f"c{k}") for k in range(arity))
    view = Rule(
        Atom(Constant(rel), Constant(target), cols),
        (Literal(Atom(Constant(aux), Constant(target), cols)),),
        aux,
        at_peer,
    )
    out.delegations[target] = [(aux, view)]
    out.new_relations.append((aux, target, arity, EXTENSIONAL))
    return out


# --------------------------------------------------------------------------
# Relation and peer variables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeferredPlan:
    """How to bind the name variables of a rule from its evaluable prefix."""

    prefix: tuple       # body literals evaluable now
    variables: tuple    # prefix variables to instantiate, in first-occurrence order


def deferred_plan(rule: Rule, at_peer: str) -> DeferredPlan | None:
    """The prefix binding plan, or None when the rule needs no instantiation now.

    None is returned when the first non-evaluable atom is ground and remote
    (split it first) or when the rule is local and ground throughout.
    """
    j = first_nonlocal(rule, at_peer)
    if j is None:
        if not rule.head.name_variables():
            return None
        j = len(rule.body)
    elif rule.body[j].atom.is_ground_name or (
        isinstance(rule.body[j].atom.peer, Constant) and rule.body[j].atom.peer.value != at_peer
    ):
        return None
    later = set(rule.head.name_variables())
    for lit in rule.body[j:]:
        later.update(lit.atom.name_variables())
    bound = _ordered_vars(l for l in rule.body[:j] if l.positive)
    wanted = tuple(v for v in bound if v in later)
    return DeferredPlan(tuple(rule.body[:j]), wanted)


def binding_key(binding: Mapping) -> tuple:
    return tuple(sorted(binding.items(), key=lambda kv: kv[0]))


def _names_ok(rule: Rule) -> bool:
    atoms = [rule.head] + [l.atom for l in rule.body]
    for a in atoms:
        if isinstance(a.relation, Constant) and not is_name(a.relation.value):
            return False
        if isinstance(a.peer, Constant) and not is_peer_name(a.peer.value):
            return False
    return True


def instantiate_deferred(rule: Rule, bindings: Iterable[Mapping], numbering=None) -> list:
    """One substituted rule per distinct binding.

    ``numbering(binding)`` supplies the instance number used in the
    ``#inst<k>`` id suffix; by default instances are numbered in order.
    Bindings that put a non-name value in a relation or peer position are
    dropped, since such atoms can never match.
    """
    out = []
    seen = set()
    for n, binding in enumerate(sorted((dict(b) for b in bindings), key=lambda b: repr(binding_key(b)))):
        key = binding_key(binding)
        if key in seen:
            continue
        seen.add(key)
        k = numbering(binding) if numbering is not None else len(out)
        inst = substitute(rule, binding, f"#inst{k}")
        if _names_ok(inst):
            out.append(inst)
    return out


@dataclass
class _Instance:
    number: int
    rule_id: str
    delegations: list = field(default_factory=list)


class DelegationRegistry:
    """Per origin rule: which bindings were instantiated and what they shipped."""

    def __init__(self):
        self._active: dict = {}
        self._numbers: dict = {}

    def register(self, origin_rule: str):
        self._active.setdefault(origin_rule, {})
        self._numbers.setdefault(origin_rule, {})

    def number(self, origin_rule: str, binding: Mapping) -> int:
        numbers = self._numbers.setdefault(origin_rule, {})
        key = binding_key(binding)
        if key not in numbers:
            numbers[key] = len(numbers)
        return numbers[key]

    def record(self, origin_rule: str, binding: Mapping, instance_id: str, delegations=()):
        self.register(origin_rule)
        key = binding_key(binding)
        self._active[origin_rule][key] = _Instance(self.number(origin_rule, binding), instance_id, list(delegations))

    def add_delegations(self, origin_rule: str, binding: Mapping, delegations):
        self._active[origin_rule][binding_key(binding)].delegations.extend(delegations)

    def active(self, origin_rule: str) -> dict:
        if origin_rule not in self._active:
            raise UnknownRule(origin_rule)
        return {k: inst.rule_id for k, inst in self._active[origin_rule].items()}

    def retract_delegations(self, origin_rule: str, stale_bindings: Iterable) -> list:
        """Forget ``stale_bindings``; return ``(target, delegation id)`` removal orders."""
        if origin_rule not in self._active:
            raise UnknownRule(origin_rule)
        active = self._active[origin_rule]
        out = []
        for b in stale_bindings:
            key = b if isinstance(b, tuple) else binding_key(b)
            inst = active.pop(key, None)
            if inst is not None:
                out.extend(inst.delegations)
        return out

    def forget(self, origin_rule: str) -> list:
        """Drop every instantiation of a removed rule (numbers are kept)."""
        active = self._active.pop(origin_rule, {})
        return [d for inst in active.values() for d in inst.delegations]
