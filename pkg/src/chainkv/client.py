"""Client library: transaction contexts with optimistic reads and buffered writes.

The same async code runs inside the simulator (futures resolved by simulated
message delivery) and over TCP (asyncio futures)::

    ctx = client.begin()
    stock = await ctx.get(key)
    ctx.put(key, Overwrite(stock - 1))
    outcome = await ctx.commit()
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass

from .core import (ABSENT, Add, ChainKVError, Delete, OpSequence, Overwrite, ReadRecord, SchemaKey,
                   TransactionPayload, WriteRecord, apply_atomic, INT64_MAX, INT64_MIN)
from .mapping import Configuration
from .messages import (AbortReason, ClientReply, ConfigResponse, Forward, GetConfig, Read, ReadReply, StatusQuery,
                       StatusReply, WrongServer)


class TxnNotOpen(ChainKVError):
    pass


class ParentBusy(ChainKVError):
    pass


class ServerUnreachable(ChainKVError):
    pass


class CommitTimeout(ChainKVError):
    pass


class State(enum.Enum):
    OPEN = "open"
    COMMITTING = "committing"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class Outcome:
    committed: bool
    reason: AbortReason | None = None
    nested_conflict: bool = False

    def __bool__(self):
        return self.committed


COMMITTED = Outcome(True)
NESTED_ABORT = Outcome(False, None, True)


def fold(prev, op):
    """Combine a buffered op with a new one so applying the result equals applying both in order."""
    if prev is None or type(op) in (Overwrite, Delete):
        return op
    tp = type(prev)
    if tp is Overwrite:
        return Overwrite(apply_atomic(prev.value, op))
    if tp is Delete:
        return Overwrite(apply_atomic(ABSENT, op))
    if tp is Add and type(op) is Add and INT64_MIN <= prev.delta + op.delta <= INT64_MAX:
        return Add(prev.delta + op.delta)
    return OpSequence((prev, op))


class TransactionContext:
    def __init__(self, client: "Client", parent: "TransactionContext | None" = None):
        self.client = client
        self.parent = parent
        self.read_cache: dict[SchemaKey, tuple] = {}
        self.write_buffer: dict = {}
        self.state = State.OPEN
        self.child: TransactionContext | None = None
        root = parent.root if parent is not None else self
        self.root = root
        # logical clock shared by a nesting tree; stamps detect parent/child interference
        self.began = root._tick() if parent is not None else 0
        self.read_stamp: dict[SchemaKey, int] = {}
        self.write_stamp: dict[SchemaKey, int] = {}
        if parent is None:
            self._clock = 0

    def _tick(self):
        self._clock += 1
        return self._clock

    def _check_open(self):
        if self.state is not State.OPEN:
            raise TxnNotOpen(f"transaction is {self.state.value}")

    # -- reads and writes ---------------------------------------------------------

    async def get(self, key: SchemaKey):
        self._check_open()
        self.read_stamp.setdefault(key, self.root._tick())
        return await self._value(key)

    async def _value(self, key):
        op = self.write_buffer.get(key)
        if op is not None and type(op) in (Overwrite, Delete):
            return apply_atomic(ABSENT, op)
        base = await self._base(key)
        return base if op is None else apply_atomic(base, op)

    async def _base(self, key):
        hit = self.read_cache.get(key)
        if hit is not None:
            return hit[0]
        if self.parent is not None and self.parent._knows(key):
            return await self.parent._value(key)
        value, version = await self.client.read(key)
        return self.read_cache.setdefault(key, (value, version))[0]

    def _knows(self, key):
        ctx = self
        while ctx is not None:
            if key in ctx.write_buffer or key in ctx.read_cache:
                return True
            ctx = ctx.parent
        return False

    def put(self, key: SchemaKey, op):
        self._check_open()
        self.write_buffer[key] = fold(self.write_buffer.get(key), op)
        self.write_stamp[key] = self.root._tick()

    # -- nesting --------------------------------------------------------------------

    def begin_nested(self) -> "TransactionContext":
        self._check_open()
        if self.child is not None and self.child.state is State.OPEN:
            raise ParentBusy("a nested transaction is already open")
        child = TransactionContext(self.client, self)
        self.child = child
        return child

    def commit_nested(self) -> Outcome:
        self._check_open()
        parent = self.parent
        if parent is None:
            raise ValueError("commit_nested on a root transaction")
        parent._check_open()
        if self._conflicts_with_parent():
            self.state = State.ABORTED
            parent.child = None
            return NESTED_ABORT
        for k, entry in self.read_cache.items():
            parent.read_cache.setdefault(k, entry)
            parent.read_stamp.setdefault(k, self.read_stamp.get(k, self.began))
        for k, stamp in self.read_stamp.items():
            parent.read_stamp.setdefault(k, stamp)
        for k, op in self.write_buffer.items():
            parent.write_buffer[k] = fold(parent.write_buffer.get(k), op)
            parent.write_stamp[k] = self.write_stamp[k]
        self.state = State.COMMITTED
        parent.child = None
        return COMMITTED

    def _conflicts_with_parent(self):
        parent = self.parent
        for k in self.read_stamp:
            if parent.write_stamp.get(k, -1) > self.began:
                return True
        for k in self.write_buffer:
            if parent.read_stamp.get(k, -1) > self.began:
                return True
        for k, (_, ver) in self.read_cache.items():
            mine = parent.read_cache.get(k)
            if mine is not None and mine[1] != ver:
                return True
        return False

    # -- completion -------------------------------------------------------------------

    def payload(self) -> TransactionPayload:
        reads = [ReadRecord(k, ver) for k, (_, ver) in sorted(self.read_cache.items())]
        writes = [WriteRecord(k, op) for k, op in sorted(self.write_buffer.items())]
        return TransactionPayload(self.client.new_txn_id(), reads, writes)

    async def commit(self) -> Outcome:
        if self.parent is not None:
            return self.commit_nested()
        self._check_open()
        if self.child is not None and self.child.state is State.OPEN:
            raise ParentBusy("a nested transaction is still open")
        if not self.read_cache and not self.write_buffer:
            self.state = State.COMMITTED
            return COMMITTED
        self.state = State.COMMITTING
        payload = self.payload()
        self.last_payload = payload
        outcome = await self.client.submit(payload)
        self.state = State.COMMITTED if outcome.committed else State.ABORTED
        return outcome

    def abort(self):
        self._check_open()
        self.state = State.ABORTED
        if self.parent is not None:
            self.parent.child = None


class Client:
    """Network-facing client handle; one per endpoint."""

    def __init__(self, address: str, net, config: Configuration, coordinator: str = "coord",
                 seed: int | None = None, read_rto_us: int = 5_000_000, commit_rto_us: int = 30_000_000,
                 txn_ids=None):
        self.address = address
        self.net = net
        self.config = config
        self.coordinator = coordinator
        self.rng = random.Random(seed)
        self._txn_ids = txn_ids
        self.read_rto_us = read_rto_us
        self.commit_rto_us = commit_rto_us
        self._req = 0
        self.reads: dict[int, list] = {}       # req -> [future, key, sent_at]
        self.commits: dict[int, list] = {}     # txn -> [future, payload, sent_at, head endpoint]
        self.status_waiters: dict[int, object] = {}
        self._sweep_armed = False
        self._asked_config = 0
        self.on_reply = None

    def new_txn_id(self) -> int:
        if self._txn_ids is not None:
            return self._txn_ids()
        return self.rng.getrandbits(128)

    # -- public API -----------------------------------------------------------------

    def begin(self) -> TransactionContext:
        return TransactionContext(self)

    async def get(self, key: SchemaKey):
        """Single committed read outside any transaction."""
        value, _ = await self.read(key)
        return value

    async def put(self, key: SchemaKey, op) -> Outcome:
        """A one-write transaction."""
        ctx = self.begin()
        ctx.put(key, op)
        return await ctx.commit()

    # -- plumbing ---------------------------------------------------------------------

    def _read_endpoint(self, key):
        cfg = self.config
        p = cfg.partition_of(key)
        return cfg.endpoint(cfg.partitions[p].replicas[0], p)

    def read(self, key: SchemaKey):
        self._req += 1
        fut = self.net.create_future()
        self.reads[self._req] = [fut, key, self.net.now()]
        self.net.send(self._read_endpoint(key), Read(self._req, key, self.config.version))
        self._arm()
        return fut

    def _head_endpoint(self, payload):
        chain = self.config.chain_for(payload)
        h = chain.hops[0]
        return self.config.endpoint(h.server, h.vs.partition)

    def submit(self, payload: TransactionPayload):
        fut = self.net.create_future()
        head = self._head_endpoint(payload)
        self.commits[payload.txn_id] = [fut, payload, self.net.now(), head]
        self.net.send(head, Forward(self.config.version, payload, self.address))
        self._arm()
        return fut

    def query_status(self, payload: TransactionPayload):
        self._req += 1
        fut = self.net.create_future()
        self.status_waiters[self._req] = fut
        key = min(w.key for w in payload.writes) if payload.writes else min(r.key for r in payload.reads)
        self.net.send(self._head_endpoint(payload),
                      StatusQuery(self._req, payload.txn_id, key, self.config.version))
        return fut

    def deliver(self, src, dst, msg):
        t = type(msg)
        if t is ReadReply:
            entry = self.reads.pop(msg.req_id, None)
            if entry is not None:
                entry[0].set_result((msg.value, msg.version))
        elif t is ClientReply:
            entry = self.commits.pop(msg.txn_id, None)
            if entry is not None:
                outcome = Outcome(msg.committed, msg.reason)
                if self.on_reply is not None:
                    self.on_reply(entry[1], outcome)
                entry[0].set_result(outcome)
        elif t is ConfigResponse:
            self.on_config(msg.config)
        elif t is WrongServer:
            if msg.config_version > self.config.version:
                self._request_config(msg.config_version)
        elif t is StatusReply:
            fut = self.status_waiters.pop(msg.req_id, None)
            if fut is not None:
                fut.set_result(msg.status)

    def _request_config(self, version):
        if version > self._asked_config:
            self._asked_config = version
            self.net.send(self.coordinator, GetConfig(version))

    def on_config(self, config: Configuration):
        if config.version <= self.config.version:
            return
        self.config = config
        now = self.net.now()
        for req, entry in self.reads.items():
            entry[2] = now
            self.net.send(self._read_endpoint(entry[1]), Read(req, entry[1], config.version))
        for txn, entry in self.commits.items():
            head = self._head_endpoint(entry[1])
            if head != entry[3]:
                entry[2] = now
                entry[3] = head
                self.net.send(head, Forward(config.version, entry[1], self.address))

    def _arm(self):
        if not self._sweep_armed and (self.reads or self.commits):
            self._sweep_armed = True
            self.net.schedule(min(self.read_rto_us, self.commit_rto_us) // 2, self._sweep)

    def _sweep(self):
        self._sweep_armed = False
        now = self.net.now()
        for req, entry in self.reads.items():
            if now - entry[2] >= self.read_rto_us:
                entry[2] = now
                self.net.send(self._read_endpoint(entry[1]), Read(req, entry[1], self.config.version))
        for txn, entry in self.commits.items():
            if now - entry[2] >= self.commit_rto_us:
                entry[2] = now
                entry[3] = self._head_endpoint(entry[1])
                self.net.send(entry[3], Forward(self.config.version, entry[1], self.address))
        self._arm()
