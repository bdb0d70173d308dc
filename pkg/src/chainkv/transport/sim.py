"""Deterministic discrete-event network simulator.

Time is an integer number of microseconds. Every source of randomness comes
from one seeded `random.Random`, and ties in the event queue are broken by
insertion order, so a seed plus a workload fully determines a run.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter, deque
from dataclasses import dataclass
from typing import NamedTuple

from ..codec import decode, encode
from ..messages import (AbortBackward, AbortForward, ClientReply, CommitBackward, Forward, RetryBackward)

# deliveries of these count as commit-protocol hops
HOP_MESSAGES = frozenset({Forward, CommitBackward, AbortForward, AbortBackward, RetryBackward, ClientReply})

_DELIVER, _TIMER, _CALL, _PROCESS = range(4)


class Crash(NamedTuple):
    server: str


class Recover(NamedTuple):
    server: str


class Drop(NamedTuple):
    src: str
    dst: str
    count: int


def node_of(endpoint: str) -> str:
    i = endpoint.find("/")
    return endpoint if i < 0 else endpoint[:i]


def txn_of(msg):
    t = type(msg)
    if t is ClientReply:
        return msg.txn_id
    return msg.payload.txn_id


class Future:
    """Minimal awaitable resolved by message handlers inside the simulator."""

    __slots__ = ("done", "value", "error", "callbacks")

    def __init__(self):
        self.done = False
        self.value = None
        self.error = None
        self.callbacks = []

    def set_result(self, value):
        if self.done:
            return
        self.done = True
        self.value = value
        cbs, self.callbacks = self.callbacks, []
        for cb in cbs:
            cb(self)

    def set_exception(self, error):
        if self.done:
            return
        self.done = True
        self.error = error
        cbs, self.callbacks = self.callbacks, []
        for cb in cbs:
            cb(self)

    def add_done_callback(self, cb):
        if self.done:
            cb(self)
        else:
            self.callbacks.append(cb)

    def result(self):
        if self.error is not None:
            raise self.error
        return self.value

    def __await__(self):
        if not self.done:
            yield self
        return self.result()


class Task(Future):
    """Drives a coroutine whose awaits are simulator futures."""

    __slots__ = ("coro",)

    def __init__(self, coro):
        super().__init__()
        self.coro = coro
        self._step(None, None)

    def _step(self, value, error):
        try:
            if error is not None:
                fut = self.coro.throw(error)
            else:
                fut = self.coro.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
            return
        except BaseException as e:  # surfaced to whoever awaits the task
            self.set_exception(e)
            return
        fut.add_done_callback(self._wake)

    def _wake(self, fut):
        self._step(fut.value, fut.error)


class NetHandle:
    """What a node sees of the network: send, clock, timers, futures."""

    __slots__ = ("net", "name")

    def __init__(self, net, name):
        self.net = net
        self.name = name

    def send(self, dst, msg):
        self.net.send(self.name, dst, msg)

    def now(self):
        return self.net.now

    def schedule(self, delay_us, fn):
        self.net.schedule(self.name, delay_us, fn)

    def create_future(self):
        return Future()

    def spawn(self, coro):
        return Task(coro)


@dataclass
class SimStats:
    delivered: Counter
    dropped: int = 0
    hops: int = 0


class Simulator:
    def __init__(self, seed: int, latency_us=(1000, 5000), service_us: int = 0, codec_check: bool = False):
        self.seed = seed
        self.rng = random.Random(seed)
        self.latency_us = latency_us
        self.service_us = service_us
        self.codec_check = codec_check
        self.now = 0
        self._q: list = []
        self._seq = 0
        self.nodes: dict = {}
        self.incarnation: dict[str, int] = {}
        self.dead: set = set()
        self._link_last: dict = {}
        self._link_seq: Counter = Counter()
        self._busy: dict = {}
        self.drops: Counter = Counter()
        self.stats = SimStats(Counter())
        self.hops_by_txn: Counter = Counter()
        self.on_crash = None
        self.on_recover = None
        self.trace: list | None = None

    # -- wiring -----------------------------------------------------------------

    def register(self, name: str, node) -> NetHandle:
        self.nodes[name] = node
        self.incarnation[name] = self.incarnation.get(name, 0) + 1
        self.dead.discard(name)
        return NetHandle(self, name)

    def handle(self, name: str) -> NetHandle:
        return NetHandle(self, name)

    def _push(self, t, kind, data):
        self._seq += 1
        heapq.heappush(self._q, (t, self._seq, kind, data))

    # -- sending ------------------------------------------------------------------

    def send(self, src: str, dst: str, msg):
        if src in self.dead:
            return
        if self.codec_check:
            msg = decode(encode(msg))
        dnode = node_of(dst)
        lo, hi = self.latency_us
        t = self.now + self.rng.randint(lo, hi)
        link = (src, dnode)
        last = self._link_last.get(link, 0)
        if t < last:
            t = last  # FIFO: never overtake an earlier message on the same link
        self._link_last[link] = t
        self._link_seq[link] += 1
        self._push(t, _DELIVER, (src, dst, dnode, msg, self.incarnation.get(dnode, 0), self._link_seq[link]))

    def schedule(self, owner: str, delay_us: int, fn):
        self._push(self.now + max(0, int(delay_us)), _TIMER, (owner, self.incarnation.get(owner, 0), fn))

    def call_at(self, t: int, fn):
        """Run fn at virtual time t regardless of node liveness (harness actions)."""
        self._push(max(t, self.now), _CALL, fn)

    # -- faults -------------------------------------------------------------------

    def inject_fault(self, at: int, what):
        self.call_at(at, lambda: self._apply_fault(what))

    def _apply_fault(self, what):
        if isinstance(what, Crash):
            self.crash(what.server)
        elif isinstance(what, Recover):
            if self.on_recover is not None:
                self.on_recover(what.server)
        elif isinstance(what, Drop):
            self.drops[(what.src, node_of(what.dst))] += what.count
        else:
            raise TypeError(f"unknown fault {what!r}")

    def crash(self, name: str):
        if name in self.dead:
            return
        self.dead.add(name)
        self.incarnation[name] = self.incarnation.get(name, 0) + 1
        if self.on_crash is not None:
            self.on_crash(name)

    # -- running ------------------------------------------------------------------

    def step(self):
        """Process one event; returns False when the queue is empty."""
        if not self._q:
            return False
        t, _, kind, data = heapq.heappop(self._q)
        self.now = t
        if kind == _DELIVER or kind == _PROCESS:
            src, dst, dnode, msg, inc, lseq = data
            if dnode in self.dead or self.incarnation.get(dnode, 0) != inc:
                self.stats.dropped += 1
                return True
            if kind == _DELIVER:
                link = (src, dnode)
                if self.drops[link] > 0:
                    self.drops[link] -= 1
                    self.stats.dropped += 1
                    return True
                if self.service_us:
                    start = max(t, self._busy.get(dnode, 0))
                    self._busy[dnode] = start + self.service_us
                    self._push(start + self.service_us, _PROCESS, data)
                    return True
            self._deliver(src, dst, dnode, msg, lseq)
        elif kind == _TIMER:
            owner, inc, fn = data
            if owner not in self.dead and self.incarnation.get(owner, 0) == inc:
                fn()
        else:
            data()
        return True

    def _deliver(self, src, dst, dnode, msg, lseq):
        t = type(msg)
        self.stats.delivered[t.__name__] += 1
        if t in HOP_MESSAGES:
            self.stats.hops += 1
            self.hops_by_txn[txn_of(msg)] += 1
        if self.trace is not None:
            self.trace.append((self.now, src, dst, lseq, t.__name__))
        node = self.nodes.get(dnode)
        if node is not None:
            node.deliver(src, dst, msg)

    def run(self, until: int | None = None, stop=None, max_events: int | None = None):
        n = 0
        q = self._q
        while q:
            if until is not None and q[0][0] > until:
                self.now = until
                break
            self.step()
            n += 1
            if stop is not None and stop():
                break
            if max_events is not None and n >= max_events:
                break
        return n


class ManualNetwork:
    """Network whose delivery order is chosen by the caller (interleaving search).

    Every link is a FIFO queue; `enabled()` lists links with a message at the
    head and `deliver(link)` hands that message to its node. Timers are
    recorded but never fire on their own.
    """

    def __init__(self):
        self.now = 0
        self.nodes: dict = {}
        self.links: dict = {}
        self.stats = SimStats(Counter())
        self.hops_by_txn: Counter = Counter()

    def register(self, name, node) -> NetHandle:
        self.nodes[name] = node
        return NetHandle(self, name)

    def handle(self, name):
        return NetHandle(self, name)

    def send(self, src, dst, msg):
        link = (src, node_of(dst))
        q = self.links.get(link)
        if q is None:
            q = self.links[link] = deque()
        q.append((dst, msg))

    def schedule(self, owner, delay_us, fn):
        pass

    def enabled(self) -> list:
        return sorted(link for link, q in self.links.items() if q)

    def deliver(self, link):
        dst, msg = self.links[link].popleft()
        self.now += 1
        t = type(msg)
        self.stats.delivered[t.__name__] += 1
        if t in HOP_MESSAGES:
            self.stats.hops += 1
            self.hops_by_txn[txn_of(msg)] += 1
        node = self.nodes.get(link[1])
        if node is not None:
            node.deliver(link[0], dst, msg)

    def in_flight(self):
        return tuple((link, tuple(_msg_key(m) for _, m in q)) for link, q in sorted(self.links.items()) if q)


def _msg_key(msg):
    t = type(msg)
    tok = getattr(msg, "token", None)
    txn = txn_of(msg) if t in HOP_MESSAGES else getattr(msg, "req_id", None)
    return (t.__name__, txn, tok, getattr(msg, "floor", None))
