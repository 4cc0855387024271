"""Seeded generators for random WebdamLog systems and local programs."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from webdamlog import oracle
from webdamlog.engine import NegationCycleError, build_dependency_graph, stratify
from webdamlog.parser import parse_rule
from webdamlog.peer import Peer, is_internal
from webdamlog.syntax import Fact
from webdamlog.transport.sim import POLICIES, SimNetConfig, SimNetwork

VARS = ("X", "Y", "Z")


def _args(rng, arity, pool, const_p=0.15):
    out = []
    for _ in range(arity):
        if not pool or rng.random() < const_p:
            out.append(str(rng.randint(0, 3)))
        else:
            out.append("$" + rng.choice(pool))
    return out


def _atom(rel, peer, args):
    return f"{rel}@{peer}({', '.join(args)})"


@dataclass
class RandomSystem:
    seed: int
    peers: list
    decls: list                                  # (kind, relation, peer, arity)
    facts: list                                  # Fact
    rules: list = field(default_factory=list)    # (origin, text)
    policy: str = "fifo-per-link"

    def describe(self) -> str:
        lines = [f"seed {self.seed} policy {self.policy}"]
        lines += [f"  {k} {r}@{p}/{a}" for k, r, p, a in self.decls]
        lines += [f"  [at {o}] {t}" for o, t in self.rules]
        lines += [f"  {f.relation}@{f.peer}{f.values}" for f in self.facts]
        return "\n".join(lines)


def random_system(seed: int, max_peers=4, max_rules=8, max_facts=50) -> RandomSystem:
    """A system with rules spanning classes A to F.

    Negation only reads base relations, which no rule derives, so every
    schedule converges to the same state. Relation-variable heads only
    write into derived relations listed in ``tg``.
    """
    rng = random.Random(seed)
    peers = [f"p{i}" for i in range(rng.randint(2, max_peers))]
    arity = {f"b{i}": rng.choice((1, 2)) for i in range(3)}
    arity.update({f"d{i}": rng.choice((1, 2)) for i in range(4)})
    arity["b0"] = 1
    arity["d0"] = 1

    base = sorted({(rng.choice(sorted(n for n in arity if n[0] == "b")), p) for p in peers for _ in range(2)})
    derived = {}
    for _ in range(rng.randint(2, 5)):
        derived[(rng.choice(sorted(n for n in arity if n[0] == "d")), rng.choice(peers))] = rng.choice(("ext", "int"))
    meta_peer = rng.choice(peers)
    decls = [("ext", r, p, arity[r]) for r, p in base]
    decls += [(k, r, p, arity[r]) for (r, p), k in sorted(derived.items())]
    decls += [("ext", "pr", meta_peer, 2), ("ext", "tg", meta_peer, 2)]

    facts = []
    unary = [(r, p) for r, p in base + sorted(derived) if arity[r] == 1]
    for rel, p in rng.sample(unary, min(len(unary), rng.randint(0, 3))):
        facts.append(Fact("pr", meta_peer, (rel, p)))
    unary_derived = [(r, p) for r, p in sorted(derived) if arity[r] == 1]
    for rel, p in rng.sample(unary_derived, min(len(unary_derived), rng.randint(0, 2))):
        facts.append(Fact("tg", meta_peer, (rel, p)))
    budget = max_facts - len(facts)
    for rel, p in base:
        for _ in range(rng.randint(0, min(8, budget))):
            facts.append(Fact(rel, p, tuple(rng.randint(0, 3) for _ in range(arity[rel]))))
            budget -= 1
    facts = list(dict.fromkeys(facts))

    system = RandomSystem(seed, peers, decls, facts, policy=POLICIES[seed % len(POLICIES)])
    at = lambda peer: [k for k in base + sorted(derived) if k[1] == peer]
    everything = base + sorted(derived)

    def head_for(cls, origin):
        options = {
            "A": [k for k, v in derived.items() if k[1] == origin and v == "int"],
            "B": [k for k, v in derived.items() if k[1] == origin and v == "ext"],
            "C": [k for k, v in derived.items() if k[1] != origin and v == "ext"],
            "D": [k for k, v in derived.items() if k[1] != origin and v == "int"],
        }.get(cls) or sorted(derived)
        return rng.choice(sorted(options))

    def body_for(cls, origin):
        local = at(origin)
        n = rng.randint(1, 3)
        if cls in "ABCD" and local:
            return [rng.choice(local) for _ in range(n)]
        atoms = [rng.choice(everything) for _ in range(n)]
        remote = [k for k in everything if k[1] != origin]
        if remote and all(p == origin for _, p in atoms):
            atoms[rng.randrange(n)] = rng.choice(remote)
        return atoms

    for _ in range(rng.randint(1, max_rules)):
        origin = rng.choice(peers)
        cls = rng.choice("ABCDEF")
        body, bound = [], []
        if cls == "F" and unary and rng.random() < 0.5:
            # relation variable in the head
            body.append(_atom("tg", meta_peer, ["$R", "$Q"]))
            rel, p = rng.choice(unary)
            body.append(_atom(rel, p, ["$X"]))
            head = _atom("$R", "$Q", ["$X"])
            bound = ["X"]
        else:
            if cls == "F":
                body.append(_atom("pr", meta_peer, ["$R", "$Q"]))
                body.append(_atom("$R", "$Q", ["$X"]))
                bound.append("X")
            for rel, p in body_for(cls, origin):
                args = _args(rng, arity[rel], VARS)
                body.append(_atom(rel, p, args))
                bound.extend(a[1:] for a in args if a.startswith("$"))
            rel, p = head_for(cls, origin)
            head = _atom(rel, p, _args(rng, arity[rel], sorted(set(bound)), const_p=0.1))
        if bound and rng.random() < 0.35:
            rel, p = rng.choice(base)
            body.append("not " + _atom(rel, p, _args(rng, arity[rel], sorted(set(bound)))))
        system.rules.append((origin, f"{head} :- {', '.join(body)}"))
    return system


def oracle_state(system: RandomSystem) -> dict:
    rules = [parse_rule(text, origin) for origin, text in system.rules]
    db = oracle.evaluate(rules, system.facts)
    out = {p: {} for p in system.peers}
    for (rel, p), values in db.items():
        if values and p in out and not is_internal(rel):
            out[p][(rel, p)] = frozenset(values)
    return out


def run_distributed(system: RandomSystem, clock="wall") -> tuple:
    net = SimNetwork(SimNetConfig(seed=system.seed, policy=system.policy))
    peers = {p: net.add_peer(Peer(p, clock=clock)) for p in system.peers}
    for peer in peers.values():
        for kind, rel, p, n in system.decls:
            peer.declare(rel, p, n, kind)
    for f in system.facts:
        peers[f.peer].insert_fact(f)
    for origin, text in system.rules:
        peers[origin].install_rule(text)
    net.run_until_quiescent(budget=5000)
    return net.state(), net, peers


# --------------------------------------------------------------------------
# Single-peer stratified programs for the local engine
# --------------------------------------------------------------------------


@dataclass
class LocalProgram:
    rules: list          # Rule objects with ids
    facts: dict          # relkey -> set
    arity: dict


def _local_rule(rng, rid, arity, heads, negatable):
    rels = sorted(arity)
    body, bound = [], []
    for _ in range(rng.randint(1, 3)):
        rel = rng.choice(rels)
        args = _args(rng, arity[rel], VARS, const_p=0.1)
        body.append(_atom(rel, "p", args))
        bound.extend(a[1:] for a in args if a.startswith("$"))
    if bound and rng.random() < 0.4:
        rel = rng.choice(negatable)
        body.append("not " + _atom(rel, "p", _args(rng, arity[rel], sorted(set(bound)))))
    head = rng.choice(heads)
    text = f"{_atom(head, 'p', _args(rng, arity[head], sorted(set(bound)), const_p=0.05))} :- {', '.join(body)}"
    return parse_rule(text, "p").with_id(rid, "p")


def stratifiable(rules) -> bool:
    try:
        stratify(build_dependency_graph(rules))
        return True
    except NegationCycleError:
        return False


def random_local_program(rng: random.Random, max_rels=6, max_rules=8, max_facts=40) -> LocalProgram:
    n = rng.randint(2, max_rels)
    arity = {f"r{i}": rng.choice((1, 2)) for i in range(n)}
    heads = sorted(arity)[n // 2:]
    rules = []
    counter = 0
    for _ in range(rng.randint(1, max_rules)):
        for _attempt in range(10):
            counter += 1
            rule = _local_rule(rng, f"p:{counter}", arity, heads, sorted(arity))
            if stratifiable(rules + [rule]):
                rules.append(rule)
                break
    facts = {}
    for _ in range(rng.randint(0, max_facts)):
        rel = rng.choice(sorted(arity))
        facts.setdefault((rel, "p"), set()).add(tuple(rng.randint(0, 3) for _ in range(arity[rel])))
    return LocalProgram(rules, facts, arity)


def as_facts(contents: dict) -> list:
    return [Fact(r, p, t) for (r, p), vals in contents.items() for t in vals]


def nonempty(contents: dict) -> dict:
    return {k: frozenset(v) for k, v in contents.items() if v}


def check_local_program(rng: random.Random, stages: int = 4) -> list:
    """Compare semi-naive, naive and incremental evaluation on one program.

    Returns a list of mismatch descriptions (empty when all agree).
    """
    from webdamlog.engine import LocalEngine

    prog = random_local_program(rng)
    problems = []
    rules = {r.id: r for r in prog.rules}
    base = {k: set(v) for k, v in prog.facts.items()}
    inc = LocalEngine()
    counter = len(prog.rules) + 100
    for stage in range(stages):
        touched = set()
        if stage:
            for _ in range(rng.randint(0, 4)):
                rel = rng.choice(sorted(prog.arity))
                key = (rel, "p")
                t = tuple(rng.randint(0, 3) for _ in range(prog.arity[rel]))
                if rng.random() < 0.5 and base.get(key):
                    base[key].discard(rng.choice(sorted(base[key])))
                else:
                    base.setdefault(key, set()).add(t)
                touched.add(key)
            roll = rng.random()
            if roll < 0.3 and rules:
                del rules[rng.choice(sorted(rules))]
            elif roll < 0.6:
                counter += 1
                heads = sorted(prog.arity)[len(prog.arity) // 2:]
                new = _local_rule(rng, f"p:{counter}", prog.arity, heads, sorted(prog.arity))
                if stratifiable(list(rules.values()) + [new]):
                    rules[new.id] = new
        heads = inc.set_rules(rules)
        result, _ = inc.evaluate(base, touched, heads)
        inc.commit(result.contents)

        fresh = LocalEngine()
        fresh.set_rules(rules)
        scratch, _ = fresh.evaluate(base, from_scratch=True)
        naive = oracle.evaluate(rules.values(), as_facts(base))
        if nonempty(scratch.contents) != nonempty(naive):
            problems.append(f"stage {stage}: semi-naive differs from naive")
        if nonempty(result.contents) != nonempty(scratch.contents):
            problems.append(f"stage {stage}: incremental differs from from-scratch")
    return problems
