import time

import pytest

from webdamlog.experiments import ALBUM_PEERS, album_data, build_album
from webdamlog.parser import parse_rule, render
from webdamlog.peer import STEPS, Peer, StageError
from webdamlog.syntax import INTENSIONAL, ArityMismatch, Fact, UnsafeRuleError
from webdamlog.transport.sim import SimNetwork
from webdamlog.transport.wire import DELEGATE_INSTALL, FACT_BATCH, SNAPSHOT_UPDATE, Message


def lone(name="p", clock="wall"):
    sent = []
    p = Peer(name, clock=clock, send=sent.append)
    return p, sent


def net_of(*names):
    net = SimNetwork()
    return net, {n: net.add_peer(Peer(n)) for n in names}


class TestHostData:
    def test_insert_then_stage(self):
        p, _ = lone()
        p.insert_fact("r@p(1)")
        assert p.query("r") == frozenset()
        p.run_stage()
        assert p.query("r") == {(1,)}

    def test_delete(self):
        p, _ = lone()
        p.insert_fact("r@p(1)")
        p.run_stage()
        p.delete_fact("r@p(1)")
        p.run_stage()
        assert p.query("r") == frozenset()

    def test_arity_checked(self):
        p, _ = lone()
        p.declare("r", "p", 2)
        with pytest.raises(ArityMismatch):
            p.insert_fact("r@p(1)")

    def test_empty_stage_sends_nothing(self):
        p, sent = lone()
        report = p.run_stage()
        assert report.msgs_out == 0 and sent == []
        assert not p.has_work()

    def test_facts_for_other_peers_are_forwarded(self):
        net, peers = net_of("p", "q")
        peers["p"].insert_fact("r@q(5)")
        net.run_until_quiescent()
        assert peers["q"].query("r") == {(5,)}
        assert peers["p"].query("r", "q") == frozenset()


class TestRules:
    def test_local_rules(self):
        p, _ = lone()
        p.declare("v", "p", 1, INTENSIONAL)
        p.install_rule("v@p($X) :- r@p($X)")
        p.install_rule("m@p($X) :- r@p($X), not s@p($X)")
        for f in ("r@p(1)", "r@p(2)", "s@p(2)"):
            p.insert_fact(f)
        p.run_stage()
        assert p.query("v") == {(1,), (2,)}
        assert p.query("m") == {(1,)}

    def test_intensional_not_persisted(self):
        p, _ = lone()
        p.declare("v", "p", 1, INTENSIONAL)
        rid = p.install_rule("v@p($X) :- r@p($X)")
        p.insert_fact("r@p(1)")
        p.run_stage()
        p.remove_rule(rid)
        p.run_stage()
        assert p.query("v") == frozenset()

    def test_extensional_head_persists(self):
        p, _ = lone()
        rid = p.install_rule("m@p($X) :- r@p($X)")
        p.insert_fact("r@p(1)")
        p.run_stage()
        p.remove_rule(rid)
        p.delete_fact("r@p(1)")
        p.run_stage()
        assert p.query("m") == {(1,)}

    def test_persistence_rule_allowed(self):
        p, _ = lone()
        p.install_rule("m@p($U) :- m@p($U)")
        p.insert_fact("m@p(3)")
        p.run_stage()
        p.run_stage()
        assert p.query("m") == {(3,)}

    def test_install_idempotent(self):
        net, peers = net_of("alice", "bob", "sue")
        a = peers["alice"]
        r1 = a.install_rule("join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)")
        r2 = a.install_rule("join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)")
        assert r1 == r2 == "alice:1"
        net.run_until_quiescent()
        assert a.install_rule("join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)") == r1
        net.run_until_quiescent()
        assert net.stats["messages.DelegateInstall"] == 1
        assert len([r for r in peers["bob"].state.records.values() if r.owner == "alice"]) == 1

    def test_unsafe_rule_rejected_at_install(self):
        p, _ = lone()
        with pytest.raises(UnsafeRuleError):
            p.install_rule("r@$X(1) :- s@p(2)")

    def test_rule_ids(self):
        p, _ = lone()
        assert p.install_rule("a@p($X) :- b@p($X)") == "p:1"
        assert p.install_rule("c@p($X) :- b@p($X)") == "p:2"

    def test_remove_rule_withdraws_delegations(self):
        net, peers = net_of("alice", "bob", "sue")
        peers["alice"].insert_fact("rel1@alice(1, 2)")
        peers["bob"].insert_fact("rel2@bob(2, 3)")
        rid = peers["alice"].install_rule("join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)")
        net.run_until_quiescent()
        assert peers["sue"].query("join") == {(3,)}
        assert any(r.owner == "alice" for r in peers["bob"].state.records.values())
        assert peers["alice"].remove_rule(rid)
        net.run_until_quiescent()
        assert not any(r.owner == "alice" for r in peers["bob"].state.records.values())
        assert not peers["alice"].remove_rule("alice:99")


class TestTransactional:
    def test_failing_stage_restores_state(self):
        p, sent = lone()
        p.insert_fact("s@p(1)")
        p.run_stage()
        before = p.fingerprint()
        p.insert_fact("s@p(2)")
        a = p.install_rule("a@p($X) :- s@p($X), not b@p($X)")
        b = p.install_rule("b@p($X) :- a@p($X)")
        with pytest.raises(StageError) as info:
            p.run_stage()
        assert p.fingerprint() == before
        assert set(info.value.culprits) & {a, b}
        assert p.has_work()
        for rid in info.value.culprits:
            p.remove_rule(rid)
        p.run_stage()
        assert p.query("s") == {(1,), (2,)}

    def test_bad_delegation_rejected_not_fatal(self):
        p, sent = lone("q")
        p.install_rule("a@q($X) :- s@q($X), not b@q($X)")
        p.run_stage()
        entry = {"id": "mid_x", "rule": "b@q($X) :- a@q($X)", "decls": []}
        p.deliver(Message(DELEGATE_INSTALL, "r", "q", 1, [entry]))
        p.run_stage()
        assert [rid for rid, _ in p.rejected] == ["mid_x"]
        assert not any(rec.owner == "r" for rec in p.state.records.values())


class TestDelegation:
    def test_album_delegation_at_picasa(self):
        p, sent = lone("danPicasa")
        for f in ('photos@danPicasa("p1")', 'features@danPicasa("p1", "alice")', 'features@danPicasa("p1", "bob")',
                  'photos@danPicasa("p2")', 'features@danPicasa("p2", "alice")'):
            p.insert_fact(f)
        rule = 'album@sue($photo, "dan") :- photos@danPicasa($photo), features@danPicasa($photo, "alice"), ' \
               'features@danPicasa($photo, "bob")'
        p.deliver(Message(DELEGATE_INSTALL, "dan", "danPicasa", 1, [{"id": "mid_d", "rule": rule, "decls": []}]))
        p.run_stage()
        batches = [m for m in sent if m.kind == FACT_BATCH and m.target == "sue"]
        assert [m.payload for m in batches] == [['album@sue("p1", "dan")']]

    def test_duplicates_dropped_by_seq(self):
        p, _ = lone("q")
        msg = Message(FACT_BATCH, "r", "q", 1, ["m@q(1)"])
        p.deliver(msg)
        p.run_stage()
        p.delete_fact("m@q(1)")
        p.run_stage()
        p.deliver(msg)
        p.run_stage()
        assert p.query("m") == frozenset()

    def test_delegation_bookkeeping(self):
        p, _ = lone("q")
        entry = {"id": "mid_y", "rule": "h@q($X) :- s@q($X)", "decls": []}
        p.deliver(Message(DELEGATE_INSTALL, "r", "q", 1, [entry]))
        p.deliver(Message(DELEGATE_INSTALL, "r", "q", 2, [entry]))
        p.run_stage()
        owned = [rec for rec in p.state.records.values() if rec.owner == "r"]
        assert len(owned) == 1
        p.deliver(Message("DelegateRemove", "r", "q", 3, ["mid_y"]))
        p.run_stage()
        assert not [rec for rec in p.state.records.values() if rec.owner == "r"]
        assert p.active_rules() == {}


class TestSnapshots:
    def setup_method(self):
        self.sent = []
        self.p1 = Peer("p1", send=self.sent.append)
        self.p1.declare("s0", "q", 2, INTENSIONAL)
        self.p1.install_rule("s0@q($X,$Y) :- r1@p1($X,$Y)")
        self.p1.insert_fact("r1@p1(0, 1)")
        self.p1.insert_fact("r1@p1(2, 3)")
        self.p1.run_stage()

    def snaps(self):
        out = [m for m in self.sent if m.kind == SNAPSHOT_UPDATE]
        self.sent.clear()
        return out

    def test_first_snapshot(self):
        (m,) = self.snaps()
        assert m.payload == [{"relation": "aux_s0_p1@q", "facts": ["aux_s0_p1@q(0, 1)", "aux_s0_p1@q(2, 3)"]}]

    def test_unchanged_sends_nothing(self):
        self.snaps()
        self.p1.insert_fact("other@p1(1)")
        self.p1.run_stage()
        assert self.snaps() == []

    def test_shrinking_contribution(self):
        self.snaps()
        self.p1.delete_fact("r1@p1(0, 1)")
        self.p1.run_stage()
        (m,) = self.snaps()
        assert m.payload[0]["facts"] == ["aux_s0_p1@q(2, 3)"]

    def test_concurrent_sources_merge(self):
        net, peers = net_of("p1", "p2", "q")
        for n in ("p1", "p2"):
            peers[n].declare("s0", "q", 2, INTENSIONAL)
            peers[n].install_rule(f"s0@q($X,$Y) :- r1@{n}($X,$Y)")
        peers["p1"].insert_fact("r1@p1(0, 1)")
        peers["p2"].insert_fact("r1@p2(4, 5)")
        net.run_until_quiescent()
        assert peers["q"].query("s0") == {(0, 1), (4, 5)}
        peers["p1"].delete_fact("r1@p1(0, 1)")
        peers["p2"].insert_fact("r1@p2(6, 7)")
        net.run_until_quiescent()
        assert peers["q"].query("s0") == {(4, 5), (6, 7)}


class TestCaseF:
    def test_two_stage_installation(self):
        p, _ = lone()
        p.insert_fact("t1@p(1)")
        p.insert_fact("t2@p(2)")
        p.install_rule("r0@p($Y) :- r1@p($X), $X@p($Y)")
        p.run_stage()
        base = p.active_rules()
        p.insert_fact('r1@p("t1")')
        p.insert_fact('r1@p("t2")')
        p.run_stage()
        assert p.active_rules() == base
        assert p.has_work()
        report = p.run_stage()
        added = set(p.active_rules()) - set(base)
        assert sorted(added) == ["p:1#inst0", "p:1#inst1"]
        assert report.rules_installed == 2
        assert p.query("r0") == {(1,), (2,)}

    def test_instances_stable_across_retract(self):
        p, _ = lone()
        p.install_rule("r0@p($Y) :- r1@p($X), $X@p($Y)")
        p.insert_fact('r1@p("t1")')
        p.insert_fact('r1@p("t2")')
        for _ in range(3):
            p.run_stage()
        first = p.active_rules()
        p.delete_fact('r1@p("t1")')
        for _ in range(3):
            p.run_stage()
        assert "p:1#inst0" not in p.active_rules()
        p.insert_fact('r1@p("t1")')
        for _ in range(3):
            p.run_stage()
        assert p.active_rules() == first


class TestAlbum:
    def test_block_and_unblock_reinstalls_same_rules(self):
        net, peers, facts = build_album()
        net.run_until_quiescent()
        before = {n: sorted(peers[n].active_rules().items(), key=lambda kv: kv[0]) for n in ALBUM_PEERS}
        n_before = len(peers["sue"].query("album"))
        peers["sue"].insert_fact('blocked@sue("dan")')
        net.run_until_quiescent()
        assert peers["dan"].active_rules() == {}
        assert len(peers["sue"].query("album")) < n_before
        peers["sue"].delete_fact('blocked@sue("dan")')
        net.run_until_quiescent()
        after = {n: sorted(peers[n].active_rules().items(), key=lambda kv: kv[0]) for n in ALBUM_PEERS}
        assert after == before
        assert len(peers["sue"].query("album")) == n_before


class TestReports:
    def test_steps_partition_stage_time(self):
        p, _ = lone()
        for i in range(200):
            p.insert_fact(Fact("r", "p", (i,)))
        p.install_rule("m@p($X) :- r@p($X)")
        t0 = time.perf_counter_ns() // 1000
        report = p.run_stage()
        elapsed = time.perf_counter_ns() // 1000 - t0
        assert list(report.steps) == list(STEPS)
        assert report.total == report.generic_time + report.delegation_time
        assert all(v >= 0 for v in report.steps.values())
        assert report.total <= elapsed

    def test_work_clock_is_deterministic(self):
        def run():
            p, _ = lone(clock="work")
            for i in range(50):
                p.insert_fact(Fact("r", "p", (i % 7, i)))
            p.install_rule("m@p($X) :- r@p($X, $Y), r@p($Y, $X)")
            return [r.steps for r in (p.run_stage(), p.run_stage())]

        assert run() == run()
