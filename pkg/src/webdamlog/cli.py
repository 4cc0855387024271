"""Command line: peer daemon, scenario simulator, benchmarks."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .parser import ParseError, parse_program, render
from .syntax import Fact, WebdamLogError

SCENARIO_DIR = Path(__file__).parent / "scenarios"


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = SCENARIO_DIR / name
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no scenario {name!r} (bundled: {', '.join(bundled_scenarios())})")


def bundled_scenarios() -> list:
    return sorted(p.name for p in SCENARIO_DIR.glob("*.wds"))


def dump_facts(peer) -> str:
    lines = []
    for (rel, at), values in sorted(peer.facts().items()):
        lines.extend(sorted(render(Fact(rel, at, v)) for v in values))
    return "\n".join(lines) + ("\n" if lines else "")


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# --------------------------------------------------------------------------
# peer
# --------------------------------------------------------------------------


def cmd_peer(args) -> int:
    from .peer import Peer
    from .transport.tcp import PeerDaemon, TcpTransport, parse_address

    peer = Peer(args.name)
    if args.program:
        path = Path(args.program)
        try:
            peer.load_program(parse_program(path.read_text(encoding="utf-8"), args.name))
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        except ParseError as e:
            print(f"{path}:{e.line}:{e.column}: {e}", file=sys.stderr)
            return 2
        except (WebdamLogError, ValueError) as e:
            print(f"{path}: {e}", file=sys.stderr)
            return 2
    try:
        addresses = {}
        for item in args.connect:
            name, _, addr = item.partition("=")
            if not name or not addr:
                raise ValueError(f"bad --connect {item!r}; expected peer=host:port")
            addresses[name] = parse_address(addr)
        transport = TcpTransport(peer, parse_address(args.listen), addresses)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    dump = Path(args.dump) if args.dump else None
    if dump is not None:
        original = peer.run_stage
        last = [None]

        def run_and_dump():
            report = original()
            text = dump_facts(peer)
            if text != last[0]:
                _write_atomic(dump, text)
                last[0] = text
            return report

        peer.run_stage = run_and_dump
    transport.start()
    daemon = PeerDaemon(peer, args.stage_interval_ms).start()
    peer.wakeup.set()
    host, port = transport.address
    print(f"peer {args.name} listening on {host}:{port}", flush=True)

    done = threading.Event()

    def stop(signum, frame):
        done.set()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    while not done.wait(0.2):
        pass
    daemon.stop(flush=True)
    transport.close()
    if dump is not None:
        _write_atomic(dump, dump_facts(peer))
    return 0


# --------------------------------------------------------------------------
# sim
# --------------------------------------------------------------------------


def cmd_sim(args) -> int:
    from .scenario import ExpectationFailed, ScenarioError, load_scenario, run_scenario

    try:
        script = load_scenario(_resolve_scenario(args.scenario))
    except (OSError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        result = run_scenario(
            script, seed=args.seed, policy=args.policy, transport=args.transport,
            clock=args.clock, metrics_out=args.metrics,
        )
    except ExpectationFailed as e:
        print(f"expectation failed: {e}", file=sys.stderr)
        return 1
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"ok: {result.checks} expectations, {len(result.reports)} stages")
    if args.dump:
        for name, peer in sorted(result.peers.items()):
            print(f"[{name}]")
            sys.stdout.write(dump_facts(peer))
    return 0


# --------------------------------------------------------------------------
# qsq-bench and experiments
# --------------------------------------------------------------------------


def _selectivities(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        value = float(part[:-1]) / 100 if part.endswith("%") else float(part)
        if not 0 <= value <= 1:
            raise argparse.ArgumentTypeError(f"selectivity {part} outside [0, 1]")
        out.append(value)
    return out


def cmd_qsq_bench(args) -> int:
    from .experiments import run_qsq

    modes = ("materialize", "delegate") if args.mode == "both" else (args.mode,)
    print("mode,selectivity,matches,tuples_transferred,wall_seconds")
    for s in args.selectivity:
        for mode in modes:
            r = run_qsq(s, mode, n=args.facts, repeats=args.repeats)
            print(f"{mode},{s:g},{r.matches},{r.tuples},{r.seconds:.6f}")
    return 0


def cmd_experiment(args) -> int:
    from . import experiments

    if args.name == "join":
        r = experiments.run_join(clock=args.clock)
        print(f"|join@sue| = {len(r.distributed)}, oracle {len(r.expected)}, match={r.ok}")
    else:
        r = experiments.run_union(clock=args.clock)
        print(f"|union@sue| = {len(r.distributed)}, oracle {len(r.expected)}, match={r.ok}; "
              f"{r.extra['instances']} instantiated rules, {r.extra['delegated']} delegated")
    print(r.table.render())
    return 0 if r.ok else 1


def cmd_check(args) -> int:
    status = 0
    for name in args.files:
        try:
            prog = parse_program(Path(name).read_text(encoding="utf-8"))
        except ParseError as e:
            print(f"{name}:{e.line}:{e.column}: {e}", file=sys.stderr)
            status = 1
            continue
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            status = 2
            continue
        print(f"{name}: {len(prog.declarations)} declarations, {len(prog.rules)} rules, {len(prog.facts)} facts")
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="webdamlog", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("peer", help="run a peer daemon over TCP")
    p.add_argument("--name", required=True)
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port to listen on")
    p.add_argument("--program", help=".wdl program to load at startup")
    p.add_argument("--connect", action="append", default=[], metavar="PEER=HOST:PORT")
    p.add_argument("--stage-interval-ms", type=float, default=None)
    p.add_argument("--dump", help="write this peer's facts here after each stage and at exit")
    p.set_defaults(func=cmd_peer)

    s = sub.add_parser("sim", help="run a scenario on the simulated network")
    s.add_argument("--scenario", required=True, help=".wds file or bundled scenario name")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", default="fifo-per-link",
                   choices=["fifo-per-link", "random-order", "adversarial-delay"])
    s.add_argument("--metrics", help="write the per-step metrics CSV here")
    s.add_argument("--clock", default="wall", choices=["wall", "work"],
                   help="wall: monotonic microseconds; work: deterministic work units")
    s.add_argument("--transport", default="sim", choices=["sim", "tcp"])
    s.add_argument("--dump", action="store_true", help="print every peer's facts at the end")
    s.set_defaults(func=cmd_sim)

    q = sub.add_parser("qsq-bench", help="materialized view vs query-time delegation")
    q.add_argument("--selectivity", type=_selectivities, default=[0.01, 0.1, 0.5, 1.0])
    q.add_argument("--mode", default="both", choices=["materialize", "delegate", "both"])
    q.add_argument("--facts", type=int, default=1000)
    q.add_argument("--repeats", type=int, default=3)
    q.set_defaults(func=cmd_qsq_bench)

    e = sub.add_parser("experiment", help="run the join or union experiment and print the step table")
    e.add_argument("name", choices=["join", "union"])
    e.add_argument("--clock", default="wall", choices=["wall", "work"])
    e.set_defaults(func=cmd_experiment)

    c = sub.add_parser("check", help="parse program files and report their contents")
    c.add_argument("files", nargs="+")
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
