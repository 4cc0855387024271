"""Socket transport: one listener per peer, one writer thread per outgoing link.

Links are plain TCP streams carrying back-to-back frames, so per-link order
is preserved. A writer reconnects lazily and resends the frame that failed;
the receiving peer drops the duplicates by sequence number.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from ..peer import StageError
from .wire import DecodeError, FrameDecoder, encode

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}; expected host:port")
    return host, int(port)


class _Writer(threading.Thread):
    def __init__(self, transport, target):
        super().__init__(name=f"wdl-writer-{transport.peer.name}-{target}", daemon=True)
        self.transport = transport
        self.target = target
        self.frames = queue.Queue()
        self.sock = None
        self.busy = False

    def run(self):
        t = self.transport
        while True:
            frame = self.frames.get()
            if frame is None:
                break
            self.busy = True
            delay = 0.01
            while not t.closing:
                try:
                    if self.sock is None:
                        addr = t.addresses.get(self.target)
                        if addr is None:
                            log.warning("%s: no address for %s; dropping frame", t.peer.name, self.target)
                            t.count("dropped")
                            break
                        self.sock = socket.create_connection(addr, timeout=5)
                    self.sock.sendall(frame)
                    t.count("sent")
                    break
                except OSError as e:
                    log.debug("%s -> %s: %s; retrying", t.peer.name, self.target, e)
                    self.close()
                    time.sleep(delay)
                    delay = min(delay * 2, 0.5)
            self.busy = False
        self.close()

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None


class TcpTransport:
    """Attach ``peer`` to a TCP listener; ``addresses`` maps peer names to (host, port)."""

    def __init__(self, peer, listen=("127.0.0.1", 0), addresses=None):
        self.peer = peer
        self.addresses = dict(addresses or {})
        self.server = socket.create_server(listen, reuse_port=False)
        self.address = self.server.getsockname()[:2]
        self.addresses.setdefault(peer.name, self.address)
        self.closing = False
        self.writers: dict = {}
        self.readers: list = []
        self.counts = {"sent": 0, "received": 0, "dropped": 0}
        self._count_lock = threading.Lock()
        self._writers_lock = threading.Lock()
        self._acceptor = threading.Thread(target=self._accept, name=f"wdl-listen-{peer.name}", daemon=True)
        peer.attach(self.send)

    def count(self, what, n=1):
        with self._count_lock:
            self.counts[what] += n

    def start(self):
        self._acceptor.start()
        return self

    def send(self, msg):
        if msg.target == self.peer.name:
            self.peer.deliver(msg)
            return
        frame = encode(msg)
        with self._writers_lock:
            w = self.writers.get(msg.target)
            if w is None:
                w = self.writers[msg.target] = _Writer(self, msg.target)
                w.start()
        w.frames.put(frame)

    def idle(self) -> bool:
        return all(w.frames.empty() and not w.busy for w in list(self.writers.values()))

    def _accept(self):
        while not self.closing:
            try:
                conn, _ = self.server.accept()
            except OSError:
                break
            r = threading.Thread(target=self._read, args=(conn,), daemon=True)
            self.readers.append((r, conn))
            r.start()

    def _read(self, conn):
        decoder = FrameDecoder()
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                for msg in decoder.feed(data):
                    self.count("received")
                    self.peer.deliver(msg)
        except DecodeError as e:
            log.warning("%s: closing connection on bad frame: %s", self.peer.name, e)
        except OSError:
            pass
        finally:
            conn.close()

    def close(self):
        # let queued frames go out before tearing down
        deadline = time.monotonic() + 2
        while not self.idle() and time.monotonic() < deadline:
            time.sleep(0.01)
        self.closing = True
        for w in list(self.writers.values()):
            w.frames.put(None)
        for w in list(self.writers.values()):
            w.join(timeout=1)
        try:
            self.server.close()
        except OSError:
            pass
        for _, conn in self.readers:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class PeerDaemon:
    """Runs a peer's stage loop in a thread: stages on inbox arrivals or timer ticks."""

    def __init__(self, peer, stage_interval_ms: float | None = None):
        self.peer = peer
        self.interval = stage_interval_ms / 1000 if stage_interval_ms else None
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._loop, name=f"wdl-stage-{peer.name}", daemon=True)
        self.busy = False
        self.errors = []

    def start(self):
        self.thread.start()
        return self

    def _loop(self):
        peer = self.peer
        while not self._stop.is_set():
            fired = peer.wakeup.wait(self.interval if self.interval else 0.05)
            peer.wakeup.clear()
            if self._stop.is_set():
                break
            self.busy = True
            try:
                if self.interval and not fired:
                    self._stage()
                while peer.has_work() and not self._stop.is_set():
                    if not self._stage():
                        break
            finally:
                self.busy = False

    def _stage(self) -> bool:
        try:
            self.peer.run_stage()
            return True
        except StageError as e:
            log.error("%s: %s", self.peer.name, e)
            self.errors.append(e)
            for rid in e.culprits:
                self.peer.remove_rule(rid)
            return bool(e.culprits)

    def stop(self, flush: bool = True):
        """Stop the loop; with ``flush`` run remaining stages so outputs go out."""
        self._stop.set()
        self.peer.wakeup.set()
        self.thread.join(timeout=5)
        if flush:
            while self.peer.has_work():
                if not self._stage():
                    break


class TcpCluster:
    """Several peers in one process, each with its own listener and stage thread."""

    def __init__(self, peers, stage_interval_ms=None):
        self.peers = {p.name: p for p in peers}
        self.transports = {}
        for name, p in self.peers.items():
            self.transports[name] = TcpTransport(p)
        addresses = {n: t.address for n, t in self.transports.items()}
        for t in self.transports.values():
            t.addresses.update(addresses)
        self.daemons = {n: PeerDaemon(p, stage_interval_ms) for n, p in self.peers.items()}

    def start(self):
        for t in self.transports.values():
            t.start()
        for d in self.daemons.values():
            d.start()
        for p in self.peers.values():
            p.wakeup.set()
        return self

    def _settled(self) -> bool:
        sent = sum(t.counts["sent"] for t in self.transports.values())
        received = sum(t.counts["received"] for t in self.transports.values())
        return (
            sent == received
            and all(t.idle() for t in self.transports.values())
            and not any(d.busy for d in self.daemons.values())
            and not any(p.has_work() for p in self.peers.values())
        )

    def wait_quiescent(self, timeout: float = 30.0, settle: int = 5):
        deadline = time.monotonic() + timeout
        calm = 0
        while calm < settle:
            if time.monotonic() > deadline:
                raise TimeoutError("cluster did not quiesce")
            calm = calm + 1 if self._settled() else 0
            time.sleep(0.02)

    def state(self) -> dict:
        return {name: p.facts() for name, p in sorted(self.peers.items())}

    def stop(self):
        for d in self.daemons.values():
            d.stop(flush=False)
        for t in self.transports.values():
            t.close()
