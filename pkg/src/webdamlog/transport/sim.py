"""Deterministic in-process network.

Messages are encoded to bytes on send and decoded on delivery, so the
simulator exercises the same wire format as the socket transport. Every
link delivers in send order; the policy only decides which links make
progress at each step.

* ``fifo-per-link``: every step delivers the head of each nonempty link.
* ``random-order``: every step delivers the head of one link chosen by the
  seeded generator.
* ``adversarial-delay``: each message is held for a seeded random number of
  ticks up to ``max_delay_ticks`` before its link may deliver it.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass

from .wire import decode, encode

POLICIES = ("fifo-per-link", "random-order", "adversarial-delay")


class QuiescenceTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class SimNetConfig:
    seed: int = 0
    policy: str = "fifo-per-link"
    max_delay_ticks: int = 4

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown delivery policy {self.policy!r}")
        if self.max_delay_ticks < 0:
            raise ValueError("max_delay_ticks must be non-negative")


class SimNetwork:
    def __init__(self, config: SimNetConfig | None = None):
        self.config = config or SimNetConfig()
        self.rng = random.Random(self.config.seed)
        self.peers: dict = {}
        self.links: dict = {}      # (sender, target) -> deque of (ready tick, bytes)
        self.tick = 0
        self.trace: list = []
        self.stats = Counter()
        self.reports: list = []

    def add_peer(self, peer):
        if peer.name in self.peers:
            raise ValueError(f"duplicate peer {peer.name}")
        self.peers[peer.name] = peer
        peer.attach(self.send)
        return peer

    # -- sending and delivery -----------------------------------------------

    def send(self, msg):
        data = encode(msg)
        link = (msg.sender, msg.target)
        q = self.links.setdefault(link, deque())
        ready = self.tick
        if self.config.policy == "adversarial-delay":
            ready += self.rng.randint(0, self.config.max_delay_ticks)
            if q:
                ready = max(ready, q[-1][0])
        q.append((ready, data))
        self.stats["messages"] += 1
        self.stats[f"messages.{msg.kind}"] += 1
        self.stats[f"tuples.{msg.kind}"] += msg.data_tuples()
        self.stats["bytes"] += len(data)
        self.trace.append(f"{self.tick} send {msg.sender}->{msg.target} #{msg.seq} {msg.kind} {len(data)}")

    def in_flight(self) -> int:
        return sum(len(q) for q in self.links.values())

    def _deliver(self, link):
        _, data = self.links[link].popleft()
        msg = decode(data)
        peer = self.peers.get(msg.target)
        if peer is None:
            self.stats["undeliverable"] += 1
            self.trace.append(f"{self.tick} drop {link[0]}->{link[1]} #{msg.seq}")
            return 0
        peer.deliver(msg)
        self.trace.append(f"{self.tick} deliver {link[0]}->{link[1]} #{msg.seq} {msg.kind}")
        return 1

    def sim_deliver_step(self) -> int:
        """Deliver the next batch of messages; returns how many were delivered."""
        live = sorted(link for link, q in self.links.items() if q)
        if not live:
            return 0
        policy = self.config.policy
        if policy == "fifo-per-link":
            chosen = live
        elif policy == "random-order":
            chosen = [self.rng.choice(live)]
        else:
            chosen = [l for l in live if self.links[l][0][0] <= self.tick]
            if not chosen:
                self.tick = min(self.links[l][0][0] for l in live)
                chosen = [l for l in live if self.links[l][0][0] <= self.tick]
        n = sum(self._deliver(link) for link in chosen)
        self.tick += 1
        return n

    # -- driving peers --------------------------------------------------------

    def run_stages(self) -> list:
        """One stage at every peer with pending work, in name order."""
        out = []
        for name in sorted(self.peers):
            peer = self.peers[name]
            if peer.has_work():
                report = peer.run_stage()
                self.trace.append(
                    f"{self.tick} stage {name} {report.stage} out={report.msgs_out} inst={report.rules_installed}"
                )
                out.append(report)
        self.reports.extend(out)
        return out

    def run_round(self) -> int:
        delivered = self.sim_deliver_step()
        return delivered + len(self.run_stages())

    def quiescent(self) -> bool:
        return self.in_flight() == 0 and not any(p.has_work() for p in self.peers.values())

    def run_until_quiescent(self, budget: int = 10_000) -> int:
        """Alternate delivery and stages until nothing is left; returns rounds used."""
        rounds = 0
        self.run_stages()
        while not self.quiescent():
            if rounds >= budget:
                raise QuiescenceTimeout(f"not quiescent after {budget} rounds")
            self.run_round()
            rounds += 1
        return rounds

    def state(self) -> dict:
        """``{peer: {relation key: frozenset}}`` over user-visible relations."""
        return {name: p.facts() for name, p in sorted(self.peers.items())}
