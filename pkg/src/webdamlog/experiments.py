"""Experiment setups: distributed join, union through relation variables,
query-time selection pushing, and the wedding photo album.

Each ``run_*`` function builds peers on a simulated network, runs to
quiescence and returns the distributed result next to the oracle's.
"""

from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass, field

from . import oracle
from .parser import parse_program, parse_rule, render
from .peer import Peer
from .syntax import INTENSIONAL, Fact
from .transport.sim import SimNetConfig, SimNetwork

JOIN_RULE = "join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)"
UNION_RULE = "union@sue($X) :- peers@sue($Y,$Z), $Y@$Z($X)"


def distinct_tuples(rng: random.Random, n: int, arity: int, lo: int, hi: int) -> list:
    seen = {}
    while len(seen) < n:
        seen.setdefault(tuple(rng.randint(lo, hi) for _ in range(arity)), None)
    return list(seen)


@dataclass
class StepTable:
    """Per-peer totals split into delegation-specific and generic steps."""

    rows: dict = field(default_factory=dict)   # peer -> {"delegation", "generic", "total"}

    @classmethod
    def from_reports(cls, reports) -> "StepTable":
        t = cls()
        for r in reports:
            row = t.rows.setdefault(r.peer, {"delegation": 0, "generic": 0, "total": 0})
            row["delegation"] += r.delegation_time
            row["generic"] += r.generic_time
            row["total"] += r.total
        return t

    def percentages(self) -> dict:
        out = {}
        for peer, row in self.rows.items():
            total = row["total"] or 1
            out[peer] = (100.0 * row["delegation"] / total, 100.0 * row["generic"] / total, row["total"])
        return out

    def render(self) -> str:
        lines = [f"{'peer':<10} {'delegation':>10} {'engine':>8} {'total_us':>10}"]
        for peer, (d, g, total) in sorted(self.percentages().items()):
            lines.append(f"{peer:<10} {d:>9.1f}% {g:>7.1f}% {total:>10}")
        return "\n".join(lines)


@dataclass
class ExperimentResult:
    peers: dict
    net: SimNetwork
    distributed: set
    expected: set
    table: StepTable
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.distributed == self.expected


def _network(names, seed=0, policy="fifo-per-link", clock="wall"):
    net = SimNetwork(SimNetConfig(seed=seed, policy=policy))
    peers = {n: net.add_peer(Peer(n, clock=clock)) for n in names}
    return net, peers


# --------------------------------------------------------------------------
# Join
# --------------------------------------------------------------------------


def join_data(seed: int = 42, n: int = 1000, lo: int = 1, hi: int = 100):
    rng = random.Random(seed)
    return distinct_tuples(rng, n, 2, lo, hi), distinct_tuples(rng, n, 2, lo, hi)


def join_reference(rel1, rel2) -> set:
    """Nested-loop join projected on the last column."""
    return {(z,) for (_, y) in rel1 for (y2, z) in rel2 if y == y2}


def run_join(seed: int = 42, n: int = 1000, clock: str = "wall") -> ExperimentResult:
    rel1, rel2 = join_data(seed, n)
    net, peers = _network(("alice", "bob", "sue"), clock=clock)
    for t in rel1:
        peers["alice"].insert_fact(Fact("rel1", "alice", t))
    for t in rel2:
        peers["bob"].insert_fact(Fact("rel2", "bob", t))
    peers["alice"].install_rule(JOIN_RULE)
    net.run_until_quiescent()
    facts = [Fact("rel1", "alice", t) for t in rel1] + [Fact("rel2", "bob", t) for t in rel2]
    expected = oracle.evaluate([parse_rule(JOIN_RULE, "alice")], facts).get(("join", "sue"), set())
    return ExperimentResult(
        peers, net, set(peers["sue"].query("join")), expected,
        StepTable.from_reports(net.reports), {"nested_loop": join_reference(rel1, rel2)},
    )


# --------------------------------------------------------------------------
# Union through relation and peer variables
# --------------------------------------------------------------------------

UNION_PEERS = ("sue", "remote1", "remote2")


def union_data(seed: int = 42, per_relation: int = 1000, hi: int = 10_000):
    rng = random.Random(seed)
    relations = {}
    k = 0
    for peer in UNION_PEERS:
        for _ in range(4):
            k += 1
            relations[(f"rel{k}", peer)] = [(rng.randint(1, hi),) for _ in range(per_relation)]
    return relations


def run_union(seed: int = 42, per_relation: int = 1000, clock: str = "wall") -> ExperimentResult:
    relations = union_data(seed, per_relation)
    net, peers = _network(UNION_PEERS, clock=clock)
    facts = []
    for (rel, peer), rows in relations.items():
        peers["sue"].insert_fact(Fact("peers", "sue", (rel, peer)))
        facts.append(Fact("peers", "sue", (rel, peer)))
        for t in rows:
            peers[peer].insert_fact(Fact(rel, peer, t))
            facts.append(Fact(rel, peer, t))
    rid = peers["sue"].install_rule(UNION_RULE)
    net.run_until_quiescent()
    expected = oracle.evaluate([parse_rule(UNION_RULE, "sue")], facts).get(("union", "sue"), set())
    sue = peers["sue"]
    parent = sue.state.records[rid]
    instances = [sue.state.records[u] for u in parent.instances.values() if u is not None]
    delegated = [r for r in instances if r.outgoing]
    return ExperimentResult(
        peers, net, set(sue.query("union")), expected, StepTable.from_reports(net.reports),
        {
            "instances": len(instances),
            "delegated": len(delegated),
            "distinct_union": len({t for rows in relations.values() for t in rows}),
        },
    )


# --------------------------------------------------------------------------
# Query-time selection pushing
# --------------------------------------------------------------------------

QSQ_VIEW = """
[at sue]
union2@sue($name,$X) :- friendPhotos@alice($name,$X)
union2@sue($name,$X) :- friendPhotos@bob($name,$X)
"""
QSQ_QUERY = """
[at sue]
union2@sue("Charlie",$X) :- friendPhotos@alice("Charlie",$X)
union2@sue("Charlie",$X) :- friendPhotos@bob("Charlie",$X)
"""
_OTHER_NAMES = ("Alice", "Bob", "Dana", "Eve", "Frank", "Grace", "Heidi", "Ivan")


def qsq_data(selectivity: float, n: int = 1000, seed: int = 42) -> dict:
    """``n`` photos per source; a ``selectivity`` fraction belongs to Charlie."""
    rng = random.Random(seed)
    data = {}
    matches = round(selectivity * n)
    for peer in ("alice", "bob"):
        rows = []
        for i in range(n):
            name = "Charlie" if i < matches else rng.choice(_OTHER_NAMES)
            rows.append((name, f"{peer}_photo{i}"))
        rng.shuffle(rows)
        data[peer] = rows
    return data


@dataclass
class QsqRun:
    mode: str
    selectivity: float
    tuples: int        # data tuples transferred while answering
    seconds: float     # median wall time from rule installation to quiescence
    answer: set
    matches: int


def _qsq_once(data, mode):
    net, peers = _network(("sue", "alice", "bob"))
    for p in peers.values():
        p.declare("union2", "sue", 2, INTENSIONAL)
    for peer, rows in data.items():
        for t in rows:
            peers[peer].insert_fact(Fact("friendPhotos", peer, t))
    net.run_until_quiescent()
    before = net.stats.copy()
    program = QSQ_VIEW if mode == "materialize" else QSQ_QUERY
    start = time.perf_counter()
    peers["sue"].load_program(program)
    net.run_until_quiescent()
    answer = {t for t in peers["sue"].query("union2") if t[0] == "Charlie"}
    seconds = time.perf_counter() - start
    moved = sum(net.stats[f"tuples.{k}"] - before[f"tuples.{k}"]
                for k in ("FactBatch", "SnapshotUpdate", "Deletion"))
    return moved, seconds, answer


def run_qsq(selectivity: float, mode: str, n: int = 1000, repeats: int = 3, seed: int = 42) -> QsqRun:
    if mode not in ("materialize", "delegate"):
        raise ValueError(f"unknown mode {mode!r}")
    data = qsq_data(selectivity, n, seed)
    matches = sum(1 for rows in data.values() for t in rows if t[0] == "Charlie")
    runs = [_qsq_once(data, mode) for _ in range(repeats)]
    tuples, _, answer = runs[0]
    return QsqRun(mode, selectivity, tuples, statistics.median(r[1] for r in runs), answer, matches)


# --------------------------------------------------------------------------
# Wedding photo album
# --------------------------------------------------------------------------

ALBUM_PEERS = ("sue", "alice", "bob", "dan", "danPicasa", "danFlickr")

SUE_PROGRAM = """
[at sue]
int allFriends@sue/1
int album@sue/2
allFriends@sue($name) :- friends@alice($name), not blocked@sue($name)
allFriends@sue($name) :- friends@bob($name), not blocked@sue($name)
album@sue($photo,$name) :-
   allFriends@sue($name),
   photoLocation@$name($peer),
   photos@$peer($photo),
   features@$peer($photo,alice),
   features@$peer($photo,bob)
"""


def album_data(seed: int = 7, photos_per_store: int = 12) -> list:
    """Friends, photo locations and tagged photos for the six peers."""
    rng = random.Random(seed)
    facts = [
        Fact("friends", "alice", ("dan",)),
        Fact("friends", "alice", ("bob",)),
        Fact("friends", "bob", ("dan",)),
        Fact("friends", "bob", ("alice",)),
        Fact("photoLocation", "alice", ("alice",)),
        Fact("photoLocation", "bob", ("bob",)),
        Fact("photoLocation", "dan", ("danPicasa",)),
        Fact("photoLocation", "dan", ("danFlickr",)),
    ]
    photo = 0
    for store in ("alice", "bob", "danPicasa", "danFlickr"):
        for _ in range(photos_per_store):
            photo += 1
            facts.append(Fact("photos", store, (photo,)))
            for tag in ("alice", "bob", "sue"):
                if rng.random() < 0.5:
                    facts.append(Fact("features", store, (photo, tag)))
    return facts


def album_reference(facts, blocked=()) -> set:
    """Photos tagged with both alice and bob at stores of unblocked friends."""
    by = {}
    for f in facts:
        by.setdefault(f.key, set()).add(f.values)
    friends = {n for (n,) in by.get(("friends", "alice"), set()) | by.get(("friends", "bob"), set())}
    out = set()
    for name in friends - set(blocked):
        for (store,) in by.get(("photoLocation", name), set()):
            tags = by.get(("features", store), set())
            for (p,) in by.get(("photos", store), set()):
                if (p, "alice") in tags and (p, "bob") in tags:
                    out.add((p, name))
    return out


def build_album(seed: int = 7, policy: str = "fifo-per-link", clock: str = "wall"):
    net, peers = _network(ALBUM_PEERS, seed=seed, policy=policy, clock=clock)
    facts = album_data(seed)
    peers["sue"].load_program(SUE_PROGRAM)
    for f in facts:
        peers[f.peer].insert_fact(f)
    return net, peers, facts


def album_oracle(facts, blocked=()) -> set:
    rules = parse_program(SUE_PROGRAM).rules
    base = list(facts) + [Fact("blocked", "sue", (b,)) for b in blocked]
    return oracle.evaluate(rules, base).get(("album", "sue"), set())


# --------------------------------------------------------------------------
# Bundled scenario files
# --------------------------------------------------------------------------


def _facts_file(peer, facts) -> str:
    return f"[at {peer}]\n" + "".join(render(f) + "\n" for f in facts)


def bundled_scenario_files() -> dict:
    """Text of every bundled ``.wds``/``.wdl`` file, generated from the seeded data."""
    files = {}
    rel1, rel2 = join_data()
    files["join_alice.wdl"] = _facts_file("alice", [Fact("rel1", "alice", t) for t in rel1])
    files["join_bob.wdl"] = _facts_file("bob", [Fact("rel2", "bob", t) for t in rel2])
    join_count = len(join_reference(rel1, rel2))
    files["join.wds"] = (
        "// alice delegates a join with bob's relation; results land at sue\n"
        "peer alice sim\npeer bob sim\npeer sue sim\n"
        "load alice join_alice.wdl\nload bob join_bob.wdl\n"
        f"install alice {JOIN_RULE}\n"
        "quiesce\n"
        f"expect sue join@sue count {join_count}\n"
        "metrics\n"
    )

    relations = union_data()
    lines = ["// union of twelve relations spread over three peers"]
    lines += [f"peer {p} sim" for p in UNION_PEERS]
    for peer in UNION_PEERS:
        facts = []
        if peer == "sue":
            facts = [Fact("peers", "sue", key) for key in relations]
        for (rel, at), rows in relations.items():
            if at == peer:
                facts.extend(Fact(rel, at, t) for t in rows)
        files[f"union_{peer}.wdl"] = _facts_file(peer, facts)
        lines.append(f"load {peer} union_{peer}.wdl")
    distinct = len({t for rows in relations.values() for t in rows})
    lines += [f"install sue {UNION_RULE}", "quiesce", f"expect sue union@sue count {distinct}", "metrics"]
    files["union.wds"] = "\n".join(lines) + "\n"

    facts = album_data()
    lines = ["// wedding album; blocking dan removes his photos"]
    lines += [f"peer {p} sim" for p in ALBUM_PEERS]
    files["album_sue.wdl"] = SUE_PROGRAM.lstrip()
    lines.append("load sue album_sue.wdl")
    for peer in ALBUM_PEERS[1:]:
        files[f"album_{peer}.wdl"] = _facts_file(peer, [f for f in facts if f.peer == peer])
        lines.append(f"load {peer} album_{peer}.wdl")
    before = album_reference(facts)
    after = album_reference(facts, ["dan"])
    lines += ["quiesce", f"expect sue album@sue count {len(before)}"]
    lines += [f"expect sue {render(Fact('album', 'sue', t))}" for t in sorted(before)]
    lines += ['insert sue blocked@sue("dan")', "quiesce", f"expect sue album@sue count {len(after)}"]
    lines += [f"expect sue not {render(Fact('album', 'sue', t))}" for t in sorted(before - after)]
    lines.append("metrics")
    files["album.wds"] = "\n".join(lines) + "\n"
    return files


def write_bundled_scenarios(directory) -> list:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, text in sorted(bundled_scenario_files().items()):
        (directory / name).write_text(text, encoding="utf-8")
        out.append(name)
    return out
