"""Per-peer datalog evaluation.

Rules reaching this module are local and ground in their relation and peer
names: every body atom lives at the evaluating peer. Heads may name remote
relations; the peer runtime turns those into outbound messages.

Relations are keyed by ``(relation, peer)`` and hold sets of value tuples.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .syntax import Constant, Rule, Variable, WebdamLogError


class NegationCycleError(WebdamLogError):
    def __init__(self, cycle: list):
        self.cycle = cycle
        names = " -> ".join(f"{r}@{p}" for r, p in cycle)
        super().__init__(f"negation inside a recursive cycle: {names}")


@dataclass(frozen=True)
class HyperEdge:
    rule_id: str
    head: tuple
    body: tuple  # ((relkey, positive), ...) in body order


@dataclass
class DependencyGraph:
    nodes: set = field(default_factory=set)
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self._out = defaultdict(set)
        for e in self.edges:
            for rel, _ in e.body:
                self._out[rel].add(e.head)

    def successors(self, rel) -> set:
        return self._out.get(rel, set())


def build_dependency_graph(rules: Iterable[Rule]) -> DependencyGraph:
    nodes: set = set()
    edges = []
    for rule in rules:
        head = rule.head.key
        body = tuple((lit.atom.key, lit.positive) for lit in rule.body)
        nodes.add(head)
        nodes.update(rel for rel, _ in body)
        edges.append(HyperEdge(rule.id, head, body))
    return DependencyGraph(nodes, edges)


def _sccs(nodes, succ) -> list:
    """Tarjan, iterative; returns components in reverse topological order."""
    index: dict = {}
    low: dict = {}
    on_stack: set = set()
    stack: list = []
    out = []
    counter = 0
    for root in sorted(nodes):
        if root in index:
            continue
        work = [(root, iter(sorted(succ(root))))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(sorted(succ(nxt)))))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                out.append(comp)
    return out


def _cycle_through(body_rel, head, members, succ) -> list:
    """A cycle ``body_rel -> head ->* body_rel`` inside one component."""
    prev = {head: None}
    queue = [head]
    while queue:
        cur = queue.pop(0)
        if cur == body_rel:
            break
        for nxt in sorted(succ(cur)):
            if nxt in members and nxt not in prev:
                prev[nxt] = cur
                queue.append(nxt)
    path = []
    node = body_rel
    while node is not None:
        path.append(node)
        node = prev.get(node)
    path.reverse()
    return [body_rel] + path if body_rel != head else [body_rel, head]


def stratify(graph: DependencyGraph) -> dict:
    """Minimal stratum per relation; raises :class:`NegationCycleError`."""
    succ = graph.successors
    comps = _sccs(graph.nodes, succ)
    comp_of = {}
    for i, comp in enumerate(comps):
        for n in comp:
            comp_of[n] = i
    incoming = defaultdict(list)  # component -> [(source component, weight)]
    for e in graph.edges:
        h = comp_of[e.head]
        for rel, positive in e.body:
            b = comp_of[rel]
            if b == h:
                if not positive:
                    members = set(comps[h])
                    raise NegationCycleError(_cycle_through(rel, e.head, members, succ))
                continue
            incoming[h].append((b, 0 if positive else 1))
    level = [0] * len(comps)
    # Tarjan emits sinks first; walk sources first
    for i in reversed(range(len(comps))):
        for src, w in incoming[i]:
            level[i] = max(level[i], level[src] + w)
    return {n: level[comp_of[n]] for n in graph.nodes}


def invalidate(graph: DependencyGraph, changed: Iterable) -> set:
    """Forward closure of ``changed`` through the hyperedges."""
    out = set()
    todo = list(changed)
    while todo:
        rel = todo.pop()
        if rel in out:
            continue
        out.add(rel)
        todo.extend(graph.successors(rel) - out)
    return out


def plan_invalidation(graph: DependencyGraph, grown=(), shrunk=(), rule_heads=()) -> set:
    """Relations whose cache cannot be extended incrementally this stage.

    Growth propagates incrementally along positive edges; it invalidates the
    head of any negative edge it reaches. Shrinking relations and heads of
    added or removed rules are invalidated outright.
    """
    seeds = set(shrunk) | set(rule_heads)
    reach = invalidate(graph, set(grown) | seeds)
    for e in graph.edges:
        if any(not positive and rel in reach for rel, positive in e.body):
            seeds.add(e.head)
    return invalidate(graph, seeds)


# --------------------------------------------------------------------------
# Rule compilation and joins
# --------------------------------------------------------------------------


class _Rel:
    __slots__ = ("facts", "indexes")

    def __init__(self, facts):
        self.facts = facts
        self.indexes = {}

    def index(self, positions):
        idx = self.indexes.get(positions)
        if idx is None:
            idx = defaultdict(list)
            for t in self.facts:
                idx[tuple(t[p] for p in positions)].append(t)
            self.indexes[positions] = idx
        return idx

    def add_all(self, new):
        self.facts.update(new)
        for positions, idx in self.indexes.items():
            for t in new:
                idx[tuple(t[p] for p in positions)].append(t)


class _Step:
    __slots__ = ("key", "positive", "arity", "lookup_pos", "lookup_src", "assign", "eq", "neg_src")

    def __init__(self, key, positive, arity):
        self.key = key
        self.positive = positive
        self.arity = arity
        self.lookup_pos = ()   # positions compared against known values
        self.lookup_src = ()   # ("c", value) or ("v", slot) per lookup position
        self.assign = ()       # (position, slot) for first occurrences
        self.eq = ()           # (position, position) for repeats inside the atom
        self.neg_src = ()      # full tuple recipe for negative literals


class CompiledRule:
    """Left-to-right join plan for one local ground rule."""

    def __init__(self, rule: Rule):
        self.rule = rule
        self.head_key = rule.head.key
        slots: dict = {}
        self.steps = []
        for lit in rule.body:
            atom = lit.atom
            step = _Step(atom.key, lit.positive, len(atom.args))
            if lit.positive:
                lookup_pos, lookup_src, assign, eq = [], [], [], []
                first_here = {}
                for i, t in enumerate(atom.args):
                    if isinstance(t, Constant):
                        lookup_pos.append(i)
                        lookup_src.append(("c", t.value))
                    elif t.name in slots:
                        lookup_pos.append(i)
                        lookup_src.append(("v", slots[t.name]))
                    elif t.name in first_here:
                        eq.append((first_here[t.name], i))
                    else:
                        first_here[t.name] = i
                for name, i in first_here.items():
                    slots[name] = len(slots)
                    assign.append((i, slots[name]))
                step.lookup_pos = tuple(lookup_pos)
                step.lookup_src = tuple(lookup_src)
                step.assign = tuple(assign)
                step.eq = tuple(eq)
            else:
                step.neg_src = tuple(
                    ("c", t.value) if isinstance(t, Constant) else ("v", slots[t.name])
                    for t in atom.args
                )
            self.steps.append(step)
        self.nslots = len(slots)
        self.head_src = tuple(
            ("c", t.value) if isinstance(t, Constant) else ("v", slots[t.name])
            for t in rule.head.args
        )
        self.positive_positions = [i for i, s in enumerate(self.steps) if s.positive]

    def run(self, source: Callable, delta_at: int | None = None, delta_rel=None, on_neg=None):
        """Yield head tuples; ``source(key)`` returns the ``_Rel`` for a body key."""
        envs = [[None] * self.nslots]
        examined = 0
        for i, step in enumerate(self.steps):
            if not envs:
                break
            if not step.positive:
                rel = source(step.key)
                if on_neg is not None:
                    on_neg(step.key)
                facts = rel.facts
                recipe = step.neg_src
                envs = [
                    env for env in envs
                    if tuple(v if k == "c" else env[v] for k, v in recipe) not in facts
                ]
                examined += len(envs)
                continue
            rel = delta_rel if i == delta_at else source(step.key)
            arity = step.arity
            out = []
            if step.lookup_pos:
                idx = rel.index(step.lookup_pos)
                src = step.lookup_src
                for env in envs:
                    cands = idx.get(tuple(v if k == "c" else env[v] for k, v in src))
                    if not cands:
                        continue
                    examined += len(cands)
                    for t in cands:
                        if len(t) != arity or any(t[a] != t[b] for a, b in step.eq):
                            continue
                        new = env[:]
                        for p, s in step.assign:
                            new[s] = t[p]
                        out.append(new)
            else:
                facts = rel.facts
                for env in envs:
                    examined += len(facts)
                    for t in facts:
                        if len(t) != arity or any(t[a] != t[b] for a, b in step.eq):
                            continue
                        new = env[:]
                        for p, s in step.assign:
                            new[s] = t[p]
                        out.append(new)
            envs = out
        recipe = self.head_src
        heads = [tuple(v if k == "c" else env[v] for k, v in recipe) for env in envs]
        return heads, examined + len(heads)


# --------------------------------------------------------------------------
# Semi-naive fixpoint
# --------------------------------------------------------------------------


@dataclass
class FixpointResult:
    contents: dict          # relkey -> set, every relation the stage knows
    delta: dict             # relkey -> facts new relative to the previous cache
    firings: int = 0        # head tuples produced, duplicates included
    work: int = 0           # tuples examined


def seminaive_fixpoint(
    rules: Mapping[str, Rule] | Iterable[Rule],
    graph: DependencyGraph,
    strata: Mapping,
    base: Mapping,
    cache: Mapping,
    invalidated: Iterable = (),
    trace: Callable | None = None,
    compiled: Mapping | None = None,
) -> FixpointResult:
    """Saturate stratum by stratum.

    ``base`` holds stored (extensional) contents after this stage's inputs;
    ``cache`` the previous stage's contents. Relations not in ``invalidated``
    continue from their cache, differentiated on what is new in ``base``;
    invalidated ones restart from ``base`` alone. Callers must invalidate any
    relation whose stored contents shrank.
    """
    rule_list = list(rules.values()) if isinstance(rules, Mapping) else list(rules)
    compiled = compiled or {}
    plans = [compiled.get(r.id) or CompiledRule(r) for r in rule_list]
    invalidated = set(invalidated)
    empty = frozenset()

    keys = set(graph.nodes) | set(base)
    rels: dict = {}
    delta: dict = {}
    heads = {p.head_key for p in plans}
    for key in keys:
        stored = base.get(key, empty)
        if key in invalidated:
            start = set(stored)
            new = set(start)
        else:
            old = cache.get(key, empty)
            new = set(stored) - old if stored else set()
            if new or key in heads:
                start = set(old) | new
            else:
                start = old  # read-only
        rels[key] = _Rel(start)
        if new:
            delta[key] = new

    empty_rel = _Rel(frozenset())

    def source(key):
        return rels.get(key, empty_rel)

    by_stratum = defaultdict(list)
    for plan in plans:
        by_stratum[strata.get(plan.head_key, 0)].append(plan)

    firings = 0
    work = 0
    current = [0]

    def on_neg(key):
        if trace is not None:
            trace("neg_read", key, current[0])

    for s in sorted(by_stratum):
        current[0] = s
        splans = by_stratum[s]
        members = {p.head_key for p in splans}
        pending = defaultdict(set)
        for plan in splans:
            if plan.head_key in invalidated:
                out, w = plan.run(source, on_neg=on_neg)
                work += w
                firings += len(out)
                pending[plan.head_key].update(out)
                continue
            for i in plan.positive_positions:
                d = delta.get(plan.steps[i].key)
                if d:
                    out, w = plan.run(source, i, _Rel(d), on_neg=on_neg)
                    work += w
                    firings += len(out)
                    pending[plan.head_key].update(out)
        while True:
            iteration = {}
            for key, facts in pending.items():
                rel = rels[key] if key in rels else rels.setdefault(key, _Rel(set()))
                new = facts - rel.facts
                if new:
                    rel.add_all(new)
                    iteration[key] = new
                    delta.setdefault(key, set()).update(new)
                    if trace is not None:
                        trace("grow", key, len(rel.facts))
            if not iteration:
                break
            pending = defaultdict(set)
            deltas = {k: _Rel(v) for k, v in iteration.items()}
            for plan in splans:
                for i in plan.positive_positions:
                    key = plan.steps[i].key
                    if key in deltas and key in members:
                        out, w = plan.run(source, i, deltas[key], on_neg=on_neg)
                        work += w
                        firings += len(out)
                        pending[plan.head_key].update(out)
        if trace is not None:
            trace("saturated", s, members)

    contents = {k: r.facts for k, r in rels.items()}
    return FixpointResult(contents, delta, firings, work)


class LocalEngine:
    """Installed ground rules of one peer plus the cross-stage cache."""

    def __init__(self):
        self.rules: dict = {}
        self.compiled: dict = {}
        self.graph = build_dependency_graph([])
        self.strata: dict = {}
        self.cache: dict = {}

    def prepare(self, rules: Mapping[str, Rule]):
        """Graph and strata for a new rule set; raises before anything changes."""
        graph = build_dependency_graph(rules.values())
        strata = stratify(graph)
        return graph, strata

    def set_rules(self, rules: Mapping[str, Rule], graph=None, strata=None) -> set:
        """Install ``rules``; returns heads of added or removed rules."""
        if graph is None:
            graph, strata = self.prepare(rules)
        old = self.rules
        changed = set()
        for rid in set(old) | set(rules):
            a, b = old.get(rid), rules.get(rid)
            if a is None or b is None or a != b:
                for r in (a, b):
                    if r is not None:
                        changed.add(r.head.key)
        self.rules = dict(rules)
        self.compiled = {
            rid: self.compiled.get(rid) if rid in old and old[rid] == r else CompiledRule(r)
            for rid, r in rules.items()
        }
        self.graph, self.strata = graph, strata
        return changed

    def diff(self, base: Mapping, touched=()):
        """``(grown, shrunk)`` stored relations relative to the cache."""
        cache = self.cache
        grown, shrunk = set(), set()
        for key in set(touched) | {k for k in base if k not in cache}:
            old = cache.get(key, ())
            now = base.get(key, ())
            if any(t not in now for t in old):
                shrunk.add(key)
            elif len(now) != len(old):
                grown.add(key)
        return grown, shrunk

    def uncached(self, base: Mapping) -> set:
        keys = set(self.graph.nodes) | set(base)
        return {k for k in keys if k not in self.cache}

    def run(self, base: Mapping, invalid, trace=None) -> FixpointResult:
        return seminaive_fixpoint(
            self.rules, self.graph, self.strata, base, self.cache, invalid, trace, self.compiled
        )

    def evaluate(self, base: Mapping, touched=(), rule_heads=(), trace=None, from_scratch=False):
        """Run the fixpoint; ``touched`` lists stored relations changed this stage."""
        if from_scratch:
            invalid = set(self.graph.nodes) | set(base) | set(self.cache)
        else:
            grown, shrunk = self.diff(base, touched)
            invalid = plan_invalidation(self.graph, grown, shrunk, rule_heads)
            invalid |= self.uncached(base)
        return self.run(base, invalid, trace), invalid

    def commit(self, contents: Mapping):
        self.cache = {k: v for k, v in contents.items()}
