"""The per-peer stage loop.

A stage has three steps:

1. collect inputs: drain the inbox, apply deletions, fact batches and
   snapshot updates to the store, install or remove delegated rules,
   activate rules queued by the previous stage, rebuild the dependency
   graph if the rule set changed;
2. run the semi-naive fixpoint over the frozen store;
3. persist derived extensional facts, emit channel facts, snapshot updates
   and delegations, and queue instantiations of rules with relation or
   peer variables for the next stage.

Each installed rule is tracked by a :class:`Record`, which remembers the
engine rules, delegations and views it produced so that removing it undoes
exactly those.
"""

from __future__ import annotations

import copy
import itertools
import logging
import threading
import time
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field

from .engine import LocalEngine, NegationCycleError, plan_invalidation
from .parser import Declaration, SourceProgram, parse_fact, parse_program, parse_rule, render
from .rewriter import (
    DelegationRegistry,
    binding_key,
    deferred_plan,
    first_nonlocal,
    instantiate_deferred,
    rewrite_view_delegation,
    sanitize,
    split_nonlocal,
)
from .syntax import (
    EXTENSIONAL,
    INTENSIONAL,
    Atom,
    Constant,
    Fact,
    Rule,
    Schema,
    Variable,
    WebdamLogError,
    validate_rule,
)
from .transport.wire import (
    DATA_KINDS,
    DELEGATE_INSTALL,
    DELEGATE_REMOVE,
    DELETION,
    FACT_BATCH,
    KINDS,
    SNAPSHOT_UPDATE,
    Message,
)

log = logging.getLogger(__name__)

STEPS = ("1a", "1b", "2a", "2b", "2c", "3a", "3b")
GENERIC_STEPS = ("1a", "2a", "2c", "3b")
DELEGATION_STEPS = ("1b", "2b", "3a")
INTERNAL_PREFIXES = ("mid_", "aux_", "__bind_")


class StageError(WebdamLogError):
    """A stage failed; the peer was left in its pre-stage state."""

    def __init__(self, message: str, culprits=()):
        super().__init__(message)
        self.culprits = list(culprits)


def is_internal(relation: str) -> bool:
    return relation.startswith(INTERNAL_PREFIXES)


# --------------------------------------------------------------------------
# Clocks
# --------------------------------------------------------------------------


class WallClock:
    """Monotonic microseconds."""

    def now(self) -> int:
        return time.perf_counter_ns() // 1000

    def tick(self, units: int = 1):
        pass


class WorkClock:
    """Deterministic clock advanced by counted units of work."""

    def __init__(self):
        self.t = 0

    def now(self) -> int:
        return self.t

    def tick(self, units: int = 1):
        self.t += units


def make_clock(kind: str):
    if kind == "wall":
        return WallClock()
    if kind == "work":
        return WorkClock()
    raise ValueError(f"unknown clock {kind!r}")


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


@dataclass
class Record:
    uid: str
    rule: Rule
    owner: str                                   # installing peer (self for host rules)
    parent: str | None = None                    # F record this instance came from
    binding: tuple | None = None
    kind: str = ""                               # A..F after activation
    engine_ids: list = field(default_factory=list)
    channel_heads: set = field(default_factory=set)
    snapshot_heads: set = field(default_factory=set)
    outgoing: list = field(default_factory=list)  # (target, delegation id)
    views: list = field(default_factory=list)     # (target, aux relation)
    bind_key: tuple | None = None
    bind_vars: tuple = ()
    instances: dict = field(default_factory=dict)  # binding key -> child uid or None


@dataclass
class PeerState:
    schema: Schema = field(default_factory=Schema)
    tables: dict = field(default_factory=dict)       # key -> set
    snapshots: dict = field(default_factory=dict)    # (sender, key) -> frozenset
    snap_union: dict = field(default_factory=dict)   # key -> frozenset
    scratches: dict = field(default_factory=dict)    # key -> set, last stage
    records: dict = field(default_factory=dict)      # uid -> Record
    delegated: dict = field(default_factory=dict)    # (sender, id) -> uid
    engine_rules: dict = field(default_factory=dict)
    engine: LocalEngine = field(default_factory=LocalEngine)
    registry: DelegationRegistry = field(default_factory=DelegationRegistry)
    view_refs: dict = field(default_factory=dict)    # (target, aux) -> set of uids
    pending_f: list = field(default_factory=list)    # ("add", uid, binding) | ("remove", uid, key)
    last_sent: dict = field(default_factory=dict)    # snapshot key -> frozenset
    channel_prev: dict = field(default_factory=dict)  # channel key -> set
    last_seq: dict = field(default_factory=dict)     # sender -> highest seq applied
    stage: int = 0

    def clone(self) -> "PeerState":
        c = copy.copy(self)
        c.schema = self.schema.copy()
        c.tables = {k: set(v) for k, v in self.tables.items()}
        c.snapshots = dict(self.snapshots)
        c.snap_union = dict(self.snap_union)
        c.scratches = dict(self.scratches)
        c.records = copy.deepcopy(self.records)
        c.delegated = dict(self.delegated)
        c.engine_rules = dict(self.engine_rules)
        c.engine = copy.copy(self.engine)
        c.registry = copy.deepcopy(self.registry)
        c.view_refs = {k: set(v) for k, v in self.view_refs.items()}
        c.pending_f = list(self.pending_f)
        c.last_sent = dict(self.last_sent)
        c.channel_prev = dict(self.channel_prev)
        c.last_seq = dict(self.last_seq)
        return c


@dataclass
class StageReport:
    peer: str
    stage: int
    steps: dict                 # step label -> micros (or work units)
    msgs_out: int = 0
    data_out: int = 0           # facts carried by outgoing messages
    rules_installed: int = 0    # rules activated this stage
    rules_removed: int = 0
    delegations_out: int = 0    # DelegateInstall entries sent
    messages_in: int = 0

    @property
    def total(self) -> int:
        return sum(self.steps.values())

    @property
    def delegation_time(self) -> int:
        return sum(self.steps[s] for s in DELEGATION_STEPS)

    @property
    def generic_time(self) -> int:
        return sum(self.steps[s] for s in GENERIC_STEPS)


class _Outbox:
    def __init__(self):
        self.facts = defaultdict(lambda: defaultdict(set))   # target -> kind -> rendered
        self.snaps = defaultdict(dict)                       # target -> "rel@peer" -> rendered list
        self.ctrl = defaultdict(OrderedDict)                 # target -> id -> (op, entry)

    def fact(self, kind, fact: Fact):
        self.facts[fact.peer][kind].add(render(fact))

    def snapshot(self, key, values):
        rel, target = key
        self.snaps[target][f"{rel}@{target}"] = sorted(render(Fact(rel, target, v)) for v in values)

    def install(self, target, did, rule, decls):
        entry = {"id": did, "rule": render(rule), "decls": sorted(decls)}
        self.ctrl[target].pop(did, None)
        self.ctrl[target][did] = ("install", entry)

    def remove(self, target, did):
        self.ctrl[target].pop(did, None)
        self.ctrl[target][did] = ("remove", did)

    def messages(self, sender, next_seq):
        out = []
        targets = sorted(set(self.facts) | set(self.snaps) | set(self.ctrl))
        for target in targets:
            for kind in KINDS:
                if kind in (FACT_BATCH, DELETION):
                    items = self.facts[target].get(kind) if target in self.facts else None
                    payload = sorted(items) if items else None
                elif kind == SNAPSHOT_UPDATE:
                    snaps = self.snaps.get(target)
                    payload = [{"relation": r, "facts": f} for r, f in sorted(snaps.items())] if snaps else None
                elif kind == DELEGATE_REMOVE:
                    ops = self.ctrl.get(target, {})
                    payload = [e for op, e in ops.values() if op == "remove"] or None
                else:
                    ops = self.ctrl.get(target, {})
                    payload = [e for op, e in ops.values() if op == "install"] or None
                if payload:
                    out.append(Message(kind, sender, target, next_seq(), payload))
        return out


# --------------------------------------------------------------------------
# Peer
# --------------------------------------------------------------------------


class Peer:
    """One WebdamLog peer: store, installed rules and the stage loop."""

    def __init__(self, name: str, clock: str = "wall", send=None):
        self.name = name
        self.state = PeerState()
        self.state.schema.peers.add(name)
        self.clock = make_clock(clock)
        self._send = send
        self._inbox = deque()
        self._lock = threading.Lock()
        self.wakeup = threading.Event()
        self._seq = itertools.count(1)
        self._seq_lock = threading.Lock()
        self._host_dirty = False
        self._host_ops = []        # ("install", Rule) | ("remove", uid), applied next stage
        self._rule_counter = itertools.count(1)
        self.trace = None          # optional engine trace callback
        self.rejected = []         # (id, reason) of refused delegations
        self.reports = []

    # -- wiring ----------------------------------------------------------

    def attach(self, send):
        """``send(message)`` is called for every outgoing message."""
        self._send = send

    def next_seq(self) -> int:
        with self._seq_lock:
            return next(self._seq)

    def deliver(self, msg: Message):
        """Append to the inbox; safe to call from any thread."""
        with self._lock:
            self._inbox.append(msg)
        self.wakeup.set()

    def has_work(self) -> bool:
        with self._lock:
            if self._inbox or self._host_dirty or self._host_ops:
                return True
        return bool(self.state.pending_f)

    # -- host API --------------------------------------------------------

    def declare(self, relation: str, peer: str, arity: int, kind: str | None = EXTENSIONAL):
        self.state.schema.declare(relation, peer, arity, kind)

    def _as_fact(self, fact) -> Fact:
        if isinstance(fact, str):
            fact = parse_fact(fact)
        self.state.schema.ensure(fact.relation, fact.peer, len(fact.values))
        return fact

    def insert_fact(self, fact):
        fact = self._as_fact(fact)
        self.deliver(Message(FACT_BATCH, self.name, self.name, 0, [render(fact)]))

    def delete_fact(self, fact):
        fact = self._as_fact(fact)
        self.deliver(Message(DELETION, self.name, self.name, 0, [render(fact)]))

    def install_rule(self, rule) -> str:
        """Validate and queue a rule for the next stage; returns its id."""
        if isinstance(rule, str):
            rule = parse_rule(rule, origin=self.name)
        validate_rule(rule, self.state.schema)
        with self._lock:
            for op, item in self._host_ops:
                if op == "install" and item == rule:
                    return item.id
            removing = {item for op, item in self._host_ops if op == "remove"}
            for uid, rec in self.state.records.items():
                if rec.owner == self.name and rec.parent is None and rec.rule == rule and uid not in removing:
                    return uid
            rule = rule.with_id(f"{self.name}:{next(self._rule_counter)}", self.name)
            self._host_ops.append(("install", rule))
        self.wakeup.set()
        return rule.id

    def remove_rule(self, rule_id: str) -> bool:
        with self._lock:
            for i, (op, item) in enumerate(self._host_ops):
                if op == "install" and item.id == rule_id:
                    del self._host_ops[i]
                    return True
            rec = self.state.records.get(rule_id)
            if rec is None or rec.owner != self.name or rec.parent is not None:
                return False
            if ("remove", rule_id) not in self._host_ops:
                self._host_ops.append(("remove", rule_id))
        self.wakeup.set()
        return True

    def load_program(self, program) -> list:
        """Declarations take effect now, facts and rules at the next stage."""
        if isinstance(program, str):
            program = parse_program(program, self.name)
        ids = []
        for d in program.declarations:
            self.declare(d.relation, d.peer or self.name, d.arity, d.kind)
        for stmt in program.statements:
            if stmt.peer not in (None, self.name):
                raise ValueError(f"statement for peer {stmt.peer} loaded into {self.name}")
            if isinstance(stmt.item, Fact):
                self.insert_fact(stmt.item)
            else:
                ids.append(self.install_rule(stmt.item))
        return ids

    def query(self, relation: str, peer: str | None = None) -> frozenset:
        """Contents of a relation at this peer as of the last stage."""
        key = (relation, peer or self.name)
        st = self.state
        out = set(st.tables.get(key, ()))
        out |= st.snap_union.get(key, frozenset())
        out |= st.scratches.get(key, set())
        return frozenset(out)

    def facts(self, internal: bool = False) -> dict:
        """Every nonempty relation stored or computed here."""
        st = self.state
        keys = set(st.tables) | set(st.snap_union) | set(st.scratches)
        out = {}
        for key in keys:
            if key[1] != self.name or (not internal and is_internal(key[0])):
                continue
            vals = self.query(*key)
            if vals:
                out[key] = vals
        return out

    def active_rules(self) -> dict:
        return dict(self.state.engine_rules)

    def fingerprint(self):
        """Comparable summary of the whole state (testing aid)."""
        st = self.state
        return (
            sorted((k, sorted(v, key=repr)) for k, v in st.tables.items()),
            sorted((k, sorted(v, key=repr)) for k, v in st.snapshots.items()),
            sorted(st.engine_rules),
            sorted(st.records),
            sorted(repr(x) for x in st.pending_f),
            sorted((k, sorted(v, key=repr)) for k, v in st.engine.cache.items()),
            sorted(st.last_seq.items()),
            st.stage,
            sorted(st.schema.kind.items()),
        )

    # -- stage -----------------------------------------------------------

    def run_stage(self) -> StageReport:
        saved = self.state.clone()
        with self._lock:
            msgs = list(self._inbox)
            self._inbox.clear()
            dirty = self._host_dirty
            self._host_dirty = False
            host, self._host_ops = self._host_ops, []
        try:
            report, out = self._stage(msgs, host)
        except Exception as e:
            self.state = saved
            with self._lock:
                self._inbox.extendleft(reversed(msgs))
                self._host_dirty = self._host_dirty or dirty
                self._host_ops[:0] = host
            if isinstance(e, StageError):
                raise
            raise StageError(f"stage failed at {self.name}: {e}") from e
        for msg in out:
            if self._send is None:
                raise StageError("peer is not attached to a transport")
            self._send(msg)
        self.reports.append(report)
        return report

    def _stage(self, msgs, host):
        st = self.state
        st.stage += 1
        clk = self.clock
        marks = [clk.now()]
        self._out = _Outbox()
        self._activated = 0
        self._removed = 0
        self._rules_changed = False
        self._new_delegated = []
        touched = set()

        # 1a: read and apply data
        control = []
        for msg in msgs:
            if msg.sender != self.name:
                if msg.seq <= st.last_seq.get(msg.sender, 0):
                    continue
                st.last_seq[msg.sender] = msg.seq
            clk.tick(1 + len(msg.payload))
            if msg.kind in (DELEGATE_INSTALL, DELEGATE_REMOVE):
                control.append(msg)
            elif msg.kind == SNAPSHOT_UPDATE:
                for entry in msg.payload:
                    self._apply_snapshot(msg.sender, entry, touched)
            else:
                for text in msg.payload:
                    self._apply_fact(msg, text, touched)
        marks.append(clk.now())

        # 1b: rules
        for msg in control:
            for entry in msg.payload:
                clk.tick(1)
                if msg.kind == DELEGATE_REMOVE:
                    self._remove_delegated(msg.sender, entry)
                else:
                    self._install_delegated(msg.sender, entry)
        host_added = []
        for op, item in host:
            clk.tick(1)
            if op == "install":
                rec = Record(item.id, item, self.name)
                try:
                    self._activate(rec)
                except WebdamLogError as e:
                    raise StageError(f"{self.name}: cannot install {item.id}: {e}", [item.id]) from e
                host_added.append(item.id)
            elif item in st.records:
                self._deactivate(st.records[item])
        pending, st.pending_f = st.pending_f, []
        for op, uid, arg in pending:
            clk.tick(1)
            parent = st.records.get(uid)
            if parent is None:
                continue
            if op == "add":
                self._add_instance(parent, arg)
            else:
                child = parent.instances.pop(arg, None)
                self._retract_instance(parent, arg, child)
        rule_heads = set()
        if self._rules_changed:
            graph, strata = self._prepare(host_added)
            rule_heads = st.engine.set_rules(st.engine_rules, graph, strata)
            clk.tick(len(graph.nodes) + len(graph.edges))
        marks.append(clk.now())

        # 2a: generic invalidation
        base = dict(st.tables)
        for key, vals in st.snap_union.items():
            base[key] = base[key] | vals if key in base else vals
        grown, shrunk = st.engine.diff(base, touched)
        invalid = plan_invalidation(st.engine.graph, grown) | st.engine.uncached(base)
        clk.tick(len(touched) + len(grown))
        marks.append(clk.now())

        # 2b: program updates and deletions
        # the union of both plans equals the joint plan
        invalid |= plan_invalidation(st.engine.graph, (), shrunk, rule_heads)
        clk.tick(len(shrunk) + len(rule_heads) + len(invalid))
        marks.append(clk.now())

        # 2c: fixpoint
        result = st.engine.run(base, invalid, self.trace)
        clk.tick(result.work)
        marks.append(clk.now())

        # 3a: store updates and packets
        contents = result.contents
        self._store_outputs(contents)
        marks.append(clk.now())

        # 3b: send
        out = self._out.messages(self.name, self.next_seq)
        clk.tick(len(out))
        marks.append(clk.now())

        steps = {s: marks[i + 1] - marks[i] for i, s in enumerate(STEPS)}
        report = StageReport(
            self.name,
            st.stage,
            steps,
            msgs_out=len(out),
            data_out=sum(m.data_tuples() for m in out if m.kind in DATA_KINDS),
            rules_installed=self._activated,
            rules_removed=self._removed,
            delegations_out=sum(len(m.payload) for m in out if m.kind == DELEGATE_INSTALL),
            messages_in=len(msgs),
        )
        return report, out

    # -- step 1 helpers ----------------------------------------------------

    def _apply_fact(self, msg, text, touched):
        st = self.state
        try:
            fact = parse_fact(text)
        except WebdamLogError as e:
            log.warning("%s: dropping unparsable fact %r from %s: %s", self.name, text, msg.sender, e)
            return
        if fact.peer != self.name:
            if msg.sender == self.name:
                self._out.fact(msg.kind, fact)
            else:
                log.warning("%s: dropping fact for %s from %s", self.name, fact.peer, msg.sender)
            return
        key = fact.key
        try:
            st.schema.ensure(fact.relation, fact.peer, len(fact.values))
        except WebdamLogError as e:
            log.warning("%s: dropping %s: %s", self.name, text, e)
            return
        if st.schema.is_intensional(*key):
            log.warning("%s: ignoring fact for intensional %s@%s", self.name, *key)
            return
        if msg.kind == DELETION:
            rel = st.tables.get(key)
            if rel is not None and fact.values in rel:
                rel.discard(fact.values)
                touched.add(key)
        else:
            rel = st.tables.setdefault(key, set())
            if fact.values not in rel:
                rel.add(fact.values)
                touched.add(key)

    def _apply_snapshot(self, sender, entry, touched):
        st = self.state
        rel, _, peer = entry["relation"].partition("@")
        key = (rel, peer)
        if peer != self.name:
            return
        values = set()
        for text in entry["facts"]:
            try:
                fact = parse_fact(text)
            except WebdamLogError as e:
                log.warning("%s: bad snapshot fact %r: %s", self.name, text, e)
                continue
            if fact.key == key:
                values.add(fact.values)
        skey = (sender, key)
        old = st.snapshots.get(skey, frozenset())
        if values == old:
            return
        if values:
            st.snapshots[skey] = frozenset(values)
        else:
            st.snapshots.pop(skey, None)
        union = set()
        for (s, k), vals in st.snapshots.items():
            if k == key:
                union |= vals
        if union:
            st.snap_union[key] = frozenset(union)
        else:
            st.snap_union.pop(key, None)
        if values and st.schema.arity(*key) is None:
            st.schema.declare(rel, peer, len(next(iter(values))), EXTENSIONAL)
        touched.add(key)

    def _install_delegated(self, sender, entry):
        st = self.state
        did = entry["id"]
        try:
            decls = [parse_program(d).declarations for d in entry["decls"]]
            rule = parse_rule(entry["rule"], origin=sender).with_id(did, sender)
            schema = st.schema.copy()
            for group in decls:
                for d in group:
                    schema.declare(d.relation, d.peer or self.name, d.arity, d.kind)
            validate_rule(rule, schema)
        except WebdamLogError as e:
            log.warning("%s: rejecting delegation %s from %s: %s", self.name, did, sender, e)
            self.rejected.append((did, str(e)))
            return
        old_uid = st.delegated.get((sender, did))
        if old_uid is not None:
            old = st.records[old_uid]
            if old.rule == rule:
                return
            self._deactivate(old)
        st.schema = schema
        uid = did if did not in st.records else f"{sender}>{did}"
        rec = Record(uid, rule, sender)
        st.delegated[(sender, did)] = uid
        try:
            self._activate(rec)
        except WebdamLogError as e:
            log.warning("%s: rejecting delegation %s from %s: %s", self.name, did, sender, e)
            self.rejected.append((did, str(e)))
            self._deactivate(rec)
            return
        self._new_delegated.append(uid)

    def _remove_delegated(self, sender, did):
        st = self.state
        uid = st.delegated.get((sender, did))
        if uid is None:
            return
        self._deactivate(st.records[uid])

    def _prepare(self, host_added):
        """Graph and strata, dropping delegations that break stratification."""
        st = self.state
        while True:
            try:
                return st.engine.prepare(st.engine_rules)
            except NegationCycleError as e:
                if self._new_delegated:
                    uid = self._new_delegated.pop()
                    rec = st.records.get(uid)
                    if rec is not None:
                        log.warning("%s: rejecting delegation %s: %s", self.name, uid, e)
                        self.rejected.append((uid, str(e)))
                        self._deactivate(rec)
                    continue
                raise StageError(f"{self.name}: {e}", culprits=host_added) from e

    # -- records -----------------------------------------------------------

    def _engine_rule(self, rec: Record, rule: Rule, rid: str):
        rule = rule.with_id(rid, rec.owner)
        self.state.engine_rules[rid] = rule
        rec.engine_ids.append(rid)
        self._rules_changed = True

    def _decls_for(self, rule: Rule) -> list:
        schema = self.state.schema
        out = set()
        for atom in (rule.head, *(l.atom for l in rule.body)):
            if not atom.is_ground_name:
                continue
            rel, peer = atom.key
            kind = schema.kind_of(rel, peer)
            if kind is not None:
                out.add(Declaration(rel, peer, len(atom.args), kind).render())
        return sorted(out)

    def _ship(self, target, did, rule):
        self._out.install(target, did, rule, self._decls_for(rule))

    def _activate(self, rec: Record):
        st = self.state
        me = self.name
        rule = rec.rule
        st.records[rec.uid] = rec
        self._activated += 1
        plan = deferred_plan(rule, me)
        if plan is not None:
            rec.kind = "F"
            name = f"__bind_{sanitize(rec.uid)}"
            rec.bind_key = (name, me)
            rec.bind_vars = plan.variables
            head = Atom(Constant(name), Constant(me), tuple(Variable(v) for v in plan.variables))
            st.schema.declare(name, me, len(plan.variables), INTENSIONAL)
            self._engine_rule(rec, Rule(head, plan.prefix), rec.uid + "/bind")
            st.registry.register(rec.uid)
            return
        for atom in (rule.head, *(l.atom for l in rule.body)):
            if atom.is_ground_name:
                st.schema.ensure(*atom.key, len(atom.args))
        if first_nonlocal(rule, me) is not None:
            rec.kind = "E"
            out = split_nonlocal(rule, me)
            for rel, peer, arity, kind in out.new_relations:
                st.schema.declare(rel, peer, arity, kind)
            for local in out.local_rules:
                self._engine_rule(rec, local, local.id)
                rec.snapshot_heads.add(local.head.key)
            for target, items in sorted(out.delegations.items()):
                for did, shipped in items:
                    self._ship(target, did.name, shipped)
                    rec.outgoing.append((target, did.name))
            return
        rel, hp = rule.head.key
        kind = st.schema.kind_of(rel, hp)
        if hp == me:
            rec.kind = "A" if kind == INTENSIONAL else "B"
            self._engine_rule(rec, rule, rec.uid)
        elif kind == INTENSIONAL:
            rec.kind = "D"
            out = rewrite_view_delegation(rule, me, st.schema)
            for r, p, arity, k in out.new_relations:
                st.schema.declare(r, p, arity, k)
            for local in out.local_rules:
                self._engine_rule(rec, local, local.id)
                rec.snapshot_heads.add(local.head.key)
            for target, items in out.delegations.items():
                for aux, view in items:
                    ref = (target, aux)
                    users = st.view_refs.setdefault(ref, set())
                    if not users:
                        self._ship(target, aux, view)
                    users.add(rec.uid)
                    rec.views.append(ref)
        else:
            rec.kind = "C"
            self._engine_rule(rec, rule, rec.uid)
            rec.channel_heads.add(rule.head.key)

    def _deactivate(self, rec: Record):
        st = self.state
        if rec.uid not in st.records:
            return
        self._removed += 1
        for rid in rec.engine_ids:
            st.engine_rules.pop(rid, None)
        if rec.engine_ids:
            self._rules_changed = True
        if rec.parent is not None and rec.parent in st.records:
            try:
                orders = st.registry.retract_delegations(rec.parent, [rec.binding])
            except WebdamLogError:
                orders = list(rec.outgoing)
        else:
            orders = list(rec.outgoing)
        for target, did in orders:
            self._out.remove(target, did)
        for ref in rec.views:
            users = st.view_refs.get(ref, set())
            users.discard(rec.uid)
            if not users:
                st.view_refs.pop(ref, None)
                self._out.remove(*ref)
        if rec.kind == "F":
            for key, child_uid in list(rec.instances.items()):
                if child_uid is not None and child_uid in st.records:
                    self._deactivate(st.records[child_uid])
            st.registry.forget(rec.uid)
            st.pending_f = [p for p in st.pending_f if p[1] != rec.uid]
        del st.records[rec.uid]
        for k, uid in list(st.delegated.items()):
            if uid == rec.uid:
                del st.delegated[k]

    def _add_instance(self, parent: Record, binding: dict):
        st = self.state
        key = binding_key(binding)
        if key in parent.instances:
            return
        number = st.registry.number(parent.uid, binding)
        rules = instantiate_deferred(parent.rule, [binding], numbering=lambda b: number)
        child = None
        if rules:
            rule = rules[0]
            try:
                validate_rule(rule, st.schema)
                child = Record(rule.id, rule, parent.owner, parent.uid, key)
                self._activate(child)
            except WebdamLogError as e:
                log.info("%s: skipping instance %s: %s", self.name, rule.id, e)
                if child is not None and child.uid in st.records:
                    self._deactivate(child)
                child = None
        parent.instances[key] = child.uid if child is not None else None
        st.registry.record(parent.uid, binding, child.uid if child else "", child.outgoing if child else [])

    def _retract_instance(self, parent: Record, key, child_uid):
        st = self.state
        if child_uid is not None and child_uid in st.records:
            # the child still names its parent, so the registry supplies its removal orders
            self._deactivate(st.records[child_uid])
        else:
            st.registry.retract_delegations(parent.uid, [key])

    # -- step 3 helpers ----------------------------------------------------

    def _store_outputs(self, contents):
        st = self.state
        me = self.name
        clk = self.clock
        schema = st.schema
        scratches = {}
        heads = {e.head for e in st.engine.graph.edges}
        for key, vals in contents.items():
            if key[1] != me:
                continue
            if schema.is_intensional(*key):
                scratches[key] = vals
            elif key in heads:
                stored = st.tables.setdefault(key, set())
                base_extra = st.snap_union.get(key, frozenset())
                new = [t for t in vals if t not in stored and t not in base_extra]
                if new:
                    stored.update(new)
                    clk.tick(len(new))
        st.scratches = scratches

        channel_heads = set()
        snapshot_heads = set()
        f_records = []
        for rec in st.records.values():
            channel_heads |= rec.channel_heads
            snapshot_heads |= rec.snapshot_heads
            if rec.kind == "F":
                f_records.append(rec)

        empty = frozenset()
        for key in sorted(channel_heads):
            cur = contents.get(key, empty)
            prev = st.channel_prev.get(key, empty)
            new = [t for t in cur if t not in prev]
            clk.tick(1 + len(new))
            for t in new:
                self._out.fact(FACT_BATCH, Fact(key[0], key[1], t))
            st.channel_prev[key] = cur
        for key in [k for k in st.channel_prev if k not in channel_heads]:
            del st.channel_prev[key]

        for key in sorted(snapshot_heads | set(st.last_sent)):
            cur = frozenset(contents.get(key, empty)) if key in snapshot_heads else empty
            clk.tick(1 + len(cur))
            if cur != st.last_sent.get(key, empty):
                self._out.snapshot(key, cur)
                if cur:
                    st.last_sent[key] = cur
                else:
                    st.last_sent.pop(key, None)

        for rec in sorted(f_records, key=lambda r: r.uid):
            rows = contents.get(rec.bind_key, empty)
            current = {}
            for row in rows:
                b = dict(zip(rec.bind_vars, row))
                current[binding_key(b)] = b
            clk.tick(1 + len(current))
            for key in sorted(set(current) - set(rec.instances), key=repr):
                st.pending_f.append(("add", rec.uid, current[key]))
            for key in sorted(set(rec.instances) - set(current), key=repr):
                st.pending_f.append(("remove", rec.uid, key))

        st.engine.commit(contents)
