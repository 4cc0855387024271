"""Single-process reference semantics.

All rules of all peers are evaluated together over the union of all facts,
as if messages were delivered instantaneously. Relation and peer variables
are resolved on the fly, so no rewriting is involved. Evaluation is naive
(every rule re-run over the whole database until nothing changes), one
stratum at a time. It is slow on purpose; it serves as ground truth.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable

from .syntax import Constant, Fact, Rule, Variable, WebdamLogError

ANY = ("*", "*")


class OracleError(WebdamLogError):
    pass


def _node(atom):
    if isinstance(atom.relation, Constant) and isinstance(atom.peer, Constant):
        return (atom.relation.value, atom.peer.value)
    return ANY


def _levels(rules: list) -> dict:
    negated = set()
    for rule in rules:
        for lit in rule.body:
            if not lit.positive:
                if _node(lit.atom) == ANY:
                    raise OracleError("negation on a variable relation is not supported")
                negated.add(_node(lit.atom))
    nodes = {ANY} | negated
    edges = []
    heads = set()
    for rule in rules:
        h = _node(rule.head)
        heads.add(h)
        nodes.add(h)
        for lit in rule.body:
            b = _node(lit.atom)
            nodes.add(b)
            edges.append((b, h, lit.positive))
    # a variable body atom may read any derived relation; a variable head
    # may write any relation that is not negated
    if any(_node(l.atom) == ANY for r in rules for l in r.body):
        for h in heads:
            if h != ANY:
                edges.append((h, ANY, True))
    if ANY in heads:
        for n in nodes:
            if n != ANY and n not in negated:
                edges.append((ANY, n, True))
    level = {n: 0 for n in nodes}
    bound = len(nodes) + 1
    changed = True
    while changed:
        changed = False
        for b, h, positive in edges:
            need = level[b] + (0 if positive else 1)
            if level[h] < need:
                level[h] = need
                if need > bound:
                    raise OracleError("program is not stratifiable")
                changed = True
    return level, negated


def _match(terms, values, env):
    env = dict(env)
    for t, v in zip(terms, values):
        if isinstance(t, Constant):
            if t.value != v:
                return None
        elif t.name in env:
            if env[t.name] != v:
                return None
        else:
            env[t.name] = v
    return env


def _resolve(term, env):
    if isinstance(term, Variable):
        if term.name not in env:
            raise OracleError(f"unbound variable ${term.name}")
        return env[term.name]
    return term.value


def _solutions(body, db, env=None):
    env = {} if env is None else env
    if not body:
        yield env
        return
    lit, rest = body[0], body[1:]
    atom = lit.atom
    key = (_resolve(atom.relation, env), _resolve(atom.peer, env))
    if lit.positive:
        for values in db.get(key, ()):
            if len(values) != len(atom.args):
                continue
            new = _match(atom.args, values, env)
            if new is not None:
                yield from _solutions(rest, db, new)
    else:
        probe = tuple(_resolve(t, env) for t in atom.args)
        if probe not in db.get(key, ()):
            yield from _solutions(rest, db, env)


def evaluate(rules: Iterable[Rule], facts: Iterable) -> dict:
    """Least stratified model as ``{(relation, peer): set of tuples}``.

    ``facts`` may be :class:`Fact` objects or ``(key, tuple)`` pairs.
    """
    rules = list(rules)
    db = defaultdict(set)
    for f in facts:
        if isinstance(f, Fact):
            db[f.key].add(f.values)
        else:
            key, values = f
            db[key].add(tuple(values))
    level, negated = _levels(rules)
    by_level = defaultdict(list)
    for rule in rules:
        by_level[level[_node(rule.head)]].append(rule)
    for lvl in sorted(by_level):
        stratum = by_level[lvl]
        while True:
            new = []
            for rule in stratum:
                for env in _solutions(rule.body, db):
                    key = (_resolve(rule.head.relation, env), _resolve(rule.head.peer, env))
                    values = tuple(_resolve(t, env) for t in rule.head.args)
                    if values not in db.get(key, ()):
                        if _node(rule.head) == ANY and key in negated:
                            raise OracleError(f"variable head derives into negated {key}")
                        new.append((key, values))
            if not new:
                break
            for key, values in new:
                db[key].add(values)
    return {k: set(v) for k, v in db.items()}
