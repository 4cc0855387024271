import pytest

from randgen import oracle_state, random_system, run_distributed
from webdamlog.peer import Peer
from webdamlog.transport.sim import POLICIES, QuiescenceTimeout, SimNetConfig, SimNetwork
from webdamlog.transport.wire import FACT_BATCH, Message


class Sink:
    def __init__(self, name):
        self.name = name
        self.got = []

    def attach(self, send):
        pass

    def deliver(self, msg):
        self.got.append(msg)

    def has_work(self):
        return False


def test_empty_queues():
    assert SimNetwork().sim_deliver_step() == 0


def test_fifo_per_link_keeps_send_order():
    net = SimNetwork()
    b = net.add_peer(Sink("b"))
    for i in (1, 2):
        net.send(Message(FACT_BATCH, "a", "b", i, [f"m@b({i})"]))
    while net.sim_deliver_step():
        pass
    assert [m.seq for m in b.got] == [1, 2]


@pytest.mark.parametrize("policy", POLICIES)
def test_link_order_kept_under_every_policy(policy):
    net = SimNetwork(SimNetConfig(seed=5, policy=policy))
    sinks = {n: net.add_peer(Sink(n)) for n in "bcd"}
    for i in range(1, 30):
        for t in "bcd":
            net.send(Message(FACT_BATCH, "a", t, i, []))
    for _ in range(1000):
        net.sim_deliver_step()
    for s in sinks.values():
        assert [m.seq for m in s.got] == list(range(1, 30))


def trace_of(policy, seed):
    net = SimNetwork(SimNetConfig(seed=seed, policy=policy))
    peers = {n: net.add_peer(Peer(n, clock="work")) for n in ("alice", "bob", "sue")}
    for i in range(30):
        peers["alice"].insert_fact(f"rel1@alice({i}, {i % 5})")
        peers["bob"].insert_fact(f"rel2@bob({i % 5}, {i})")
    peers["alice"].install_rule("join@sue($Z) :- rel1@alice($X,$Y), rel2@bob($Y,$Z)")
    peers["bob"].install_rule("copy@alice($X) :- rel2@bob($X, $Y)")
    net.run_until_quiescent()
    return net.trace, net.state()


@pytest.mark.parametrize("policy", POLICIES)
def test_same_seed_same_trace(policy):
    assert trace_of(policy, 3) == trace_of(policy, 3)


def test_seeds_change_random_schedule():
    traces = {tuple(trace_of("random-order", s)[0]) for s in range(4)}
    assert len(traces) > 1


def test_monotone_program_converges_under_every_schedule():
    states = [trace_of(p, s)[1] for p in POLICIES for s in range(3)]
    assert all(s == states[0] for s in states)


def test_quiescence_budget():
    net = SimNetwork()
    a, b = net.add_peer(Peer("a")), net.add_peer(Peer("b"))
    a.install_rule("ping@b($X) :- pong@a($X)")
    b.install_rule("pong@a($X) :- ping@b($X)")
    a.insert_fact("pong@a(1)")
    net.run_until_quiescent()
    assert b.query("ping") == {(1,)}
    a.insert_fact("pong@a(2)")
    with pytest.raises(QuiescenceTimeout):
        net.run_until_quiescent(budget=0)
    net.run_until_quiescent()
    assert b.query("ping") == {(1,), (2,)}


def test_undeliverable_counted():
    net = SimNetwork()
    net.add_peer(Peer("a"))
    net.send(Message(FACT_BATCH, "a", "ghost", 1, ["m@ghost(1)"]))
    net.sim_deliver_step()
    assert net.stats["undeliverable"] == 1


def test_bad_policy():
    with pytest.raises(ValueError):
        SimNetConfig(policy="lossy")


@pytest.mark.parametrize("seed", [201, 202, 203, 204, 205, 206])
def test_schedules_agree_with_oracle(seed):
    system = random_system(seed)
    want = oracle_state(system)
    for policy in POLICIES:
        system.policy = policy
        got, _, _ = run_distributed(system)
        assert got == want, system.describe()
