"""Line-oriented scenario scripts (``.wds``).

One directive per line; ``//`` and ``#`` start comments::

    peer NAME [sim | host:port]
    load PEER FILE                  program file, relative to the script
    declare PEER ext|int rel@peer/N
    insert PEER FACT
    delete PEER FACT
    install PEER RULE
    remove PEER RULE_ID
    run N                           N delivery rounds
    quiesce [BUDGET]                run until quiescent
    expect PEER FACT                fact is present
    expect PEER not FACT            fact is absent
    expect PEER rel@peer count N
    metrics [FILE]                  write the per-step metrics CSV

Expectations are assertions: the first failing one stops the run.
"""

from __future__ import annotations

import csv
import io
import shlex
from dataclasses import dataclass, field
from pathlib import Path

from .parser import parse_declaration, parse_fact
from .peer import STEPS, Peer
from .transport.sim import SimNetConfig, SimNetwork
from .syntax import WebdamLogError

METRICS_HEADER = ("peer", "stage", "step", "micros", "msgs_out", "rules_installed")


class ScenarioError(WebdamLogError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ExpectationFailed(ScenarioError):
    pass


@dataclass(frozen=True)
class Directive:
    line: int
    op: str
    args: tuple


@dataclass
class ScenarioScript:
    directives: list = field(default_factory=list)
    base_dir: Path = Path(".")


_ARITY = {
    "peer": (1, 2),
    "load": (2, 2),
    "declare": (2, 2),
    "insert": (2, 2),
    "delete": (2, 2),
    "install": (2, 2),
    "remove": (2, 2),
    "run": (1, 1),
    "quiesce": (0, 1),
    "expect": (2, 4),
    "metrics": (0, 1),
}


def _split(op: str, rest: str, line: int) -> tuple:
    """Arguments: PEER then the remainder kept verbatim, or shell-like words."""
    rest = rest.strip()
    if op in ("insert", "delete", "install", "declare"):
        peer, _, tail = rest.partition(" ")
        if not tail.strip():
            raise ScenarioError(line, f"{op} needs a peer and an item")
        return (peer, tail.strip())
    if op == "expect":
        peer, _, tail = rest.partition(" ")
        tail = tail.strip()
        words = tail.split()
        if len(words) == 3 and words[1] == "count":
            return (peer, words[0], "count", words[2])
        if words and words[0] == "not":
            return (peer, "not", tail[3:].strip())
        return (peer, tail)
    return tuple(shlex.split(rest))


def parse_scenario(text: str, base_dir=".") -> ScenarioScript:
    script = ScenarioScript(base_dir=Path(base_dir))
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("//", 1)[0] if '"' not in raw else raw
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("//"):
            continue
        op, _, rest = line.partition(" ")
        if op not in _ARITY:
            raise ScenarioError(n, f"unknown directive {op!r}")
        args = _split(op, rest, n)
        lo, hi = _ARITY[op]
        if not lo <= len(args) <= hi:
            raise ScenarioError(n, f"{op} takes {lo}..{hi} arguments, got {len(args)}")
        script.directives.append(Directive(n, op, args))
    return script


def load_scenario(path) -> ScenarioScript:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), path.parent)


def metrics_rows(reports) -> list:
    rows = []
    for r in reports:
        for step in STEPS:
            rows.append((
                r.peer,
                r.stage,
                step,
                r.steps[step],
                r.msgs_out if step == "3b" else 0,
                r.rules_installed if step == "1b" else 0,
            ))
    return rows


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(metrics_rows(reports))
    return buf.getvalue()


class _SimDriver:
    def __init__(self, config, clock):
        self.net = SimNetwork(config)
        self.clock = clock

    def add(self, name, address):
        return self.net.add_peer(Peer(name, clock=self.clock))

    def start(self):
        pass

    def rounds(self, n):
        self.net.run_stages()
        for _ in range(n):
            self.net.run_round()

    def quiesce(self, budget):
        self.net.run_until_quiescent(budget)

    def reports(self):
        return list(self.net.reports)

    def stop(self):
        pass


class _TcpDriver:
    def __init__(self, clock):
        self.clock = clock
        self.peers = []
        self.cluster = None

    def add(self, name, address):
        p = Peer(name, clock=self.clock)
        self.peers.append(p)
        return p

    def start(self):
        if self.cluster is None:
            from .transport.tcp import TcpCluster

            self.cluster = TcpCluster(self.peers).start()

    def rounds(self, n):
        self.quiesce(None)

    def quiesce(self, budget):
        self.start()
        self.cluster.wait_quiescent()

    def reports(self):
        return [r for p in self.peers for r in p.reports]

    def stop(self):
        if self.cluster is not None:
            self.cluster.stop()


@dataclass
class ScenarioResult:
    peers: dict
    reports: list
    checks: int = 0

    def state(self) -> dict:
        return {name: p.facts() for name, p in sorted(self.peers.items())}

    def metrics_csv(self) -> str:
        return metrics_csv(self.reports)


def run_scenario(script: ScenarioScript, seed: int = 0, policy: str = "fifo-per-link",
                 transport: str = "sim", clock: str = "wall", metrics_out=None) -> ScenarioResult:
    if transport == "sim":
        driver = _SimDriver(SimNetConfig(seed=seed, policy=policy), clock)
    elif transport == "tcp":
        driver = _TcpDriver(clock)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    peers: dict = {}
    checks = 0

    def peer_of(d, name):
        if name not in peers:
            raise ScenarioError(d.line, f"unknown peer {name!r}")
        return peers[name]

    try:
        for d in script.directives:
            try:
                op, args = d.op, d.args
                if op == "peer":
                    if args[0] in peers:
                        raise ScenarioError(d.line, f"peer {args[0]} declared twice")
                    peers[args[0]] = driver.add(args[0], args[1] if len(args) > 1 else "sim")
                elif op == "load":
                    path = script.base_dir / args[1]
                    peer_of(d, args[0]).load_program(path.read_text(encoding="utf-8"))
                elif op == "declare":
                    decl = parse_declaration(args[1])
                    p = peer_of(d, args[0])
                    p.declare(decl.relation, decl.peer or p.name, decl.arity, decl.kind)
                elif op == "insert":
                    peer_of(d, args[0]).insert_fact(args[1])
                elif op == "delete":
                    peer_of(d, args[0]).delete_fact(args[1])
                elif op == "install":
                    peer_of(d, args[0]).install_rule(args[1])
                elif op == "remove":
                    if not peer_of(d, args[0]).remove_rule(args[1]):
                        raise ScenarioError(d.line, f"no rule {args[1]} at {args[0]}")
                elif op == "run":
                    driver.rounds(int(args[0]))
                elif op == "quiesce":
                    driver.quiesce(int(args[0]) if args else 10_000)
                elif op == "expect":
                    checks += 1
                    _check(d, peer_of(d, args[0]), args[1:])
                elif op == "metrics":
                    target = args[0] if args else metrics_out
                    if target:
                        Path(target).write_text(metrics_csv(driver.reports()), encoding="utf-8")
            except ScenarioError:
                raise
            except (WebdamLogError, ValueError, OSError) as e:
                raise ScenarioError(d.line, str(e)) from e
        reports = driver.reports()
    finally:
        driver.stop()
    if metrics_out:
        Path(metrics_out).write_text(metrics_csv(reports), encoding="utf-8")
    return ScenarioResult(peers, reports, checks)


def _check(d, peer, args):
    if len(args) == 3 and args[1] == "count":
        rel, _, at = args[0].partition("@")
        got = len(peer.query(rel, at or peer.name))
        if got != int(args[2]):
            raise ExpectationFailed(d.line, f"{args[0]} has {got} facts, expected {args[2]}")
        return
    negate = args[0] == "not"
    fact = parse_fact(args[-1])
    present = fact.values in peer.query(fact.relation, fact.peer)
    if present == negate:
        word = "present" if negate else "missing"
        raise ExpectationFailed(d.line, f"{args[-1]} {word} at {peer.name}")
