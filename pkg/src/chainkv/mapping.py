"""Partition mapping, chain construction, membership changes and the coordinator."""

from __future__ import annotations

import asyncio
import json
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .codec import register
from .core import ChainKVError, SchemaKey, TransactionPayload, footprint
from .messages import (ConfigResponse, CoordinatorError, GetConfig, JoinRequest, RecoveryDone, ReportFail,
                       Subscribe)

log = logging.getLogger(__name__)


class NoReplacementAvailable(ChainKVError):
    pass


class UnknownServer(ChainKVError):
    pass


class TailHasNoForward(ChainKVError):
    pass


class ConfigTimeout(ChainKVError):
    pass


@register(20)
class VirtualServerId(NamedTuple):
    partition: int
    slot: int


@register(21)
class Hop(NamedTuple):
    vs: VirtualServerId
    server: int


@register(22)
class RosterEntry(NamedTuple):
    server_id: int
    address: str
    live: bool


@register(23)
@dataclass(frozen=True)
class Partition:
    """A key range and its replica set.

    `since[i]` is the configuration version at which `replicas[i]` joined the
    set; `pending` lists replicas still copying state from a survivor.
    """
    schema: str
    lower: bytes
    replicas: tuple
    since: tuple
    pending: tuple = ()


CLIENT = "client"
FORWARD = "forward"
BACKWARD = "backward"


@register(24)
@dataclass(frozen=True)
class Configuration:
    version: int
    f: int
    partitions: tuple
    roster: tuple
    _bounds: list = field(init=False, repr=False, compare=False)
    _addr: dict = field(init=False, repr=False, compare=False)
    _live: frozenset = field(init=False, repr=False, compare=False)
    _chains: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bounds", [(p.schema, p.lower) for p in self.partitions])
        object.__setattr__(self, "_addr", {r.server_id: r.address for r in self.roster})
        object.__setattr__(self, "_live", frozenset(r.server_id for r in self.roster if r.live))
        object.__setattr__(self, "_chains", {})

    def partition_of(self, key: SchemaKey) -> int:
        # the first partition also absorbs everything below its bound
        i = bisect_right(self._bounds, key) - 1
        return i if i > 0 else 0

    def replicas(self, p: int) -> tuple:
        return self.partitions[p].replicas

    def address(self, server_id: int) -> str:
        return self._addr[server_id]

    def endpoint(self, server_id: int, partition: int) -> str:
        return f"{self._addr[server_id]}/{partition}"

    def is_live(self, server_id: int) -> bool:
        return server_id in self._live

    @property
    def live_servers(self) -> list:
        return sorted(self._live)

    def owned_by(self, server_id: int) -> dict:
        """partition -> replica slot for every partition the server belongs to."""
        return {i: p.replicas.index(server_id) for i, p in enumerate(self.partitions) if server_id in p.replicas}

    def unavailable_partitions(self) -> list:
        return [i for i, p in enumerate(self.partitions) if not all(r in self._live for r in p.replicas)]

    def state_bearing(self, p: int) -> list:
        part = self.partitions[p]
        return [r for r in part.replicas if r in self._live and r not in part.pending]

    def chain_for(self, payload: TransactionPayload) -> "Chain":
        c = self._chains.get(payload.txn_id)
        if c is None:
            if len(self._chains) > 8192:
                self._chains.clear()
            c = build_chain(payload, self)
            self._chains[payload.txn_id] = c
        return c

    def __deepcopy__(self, memo):
        return self  # immutable snapshot

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "f": self.f,
            "partitions": [{"schema": p.schema, "lower": p.lower.hex(), "replicas": list(p.replicas),
                            "since": list(p.since), "pending": list(p.pending)} for p in self.partitions],
            "roster": [[r.server_id, r.address, r.live] for r in self.roster],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Configuration":
        parts = tuple(Partition(p["schema"], bytes.fromhex(p["lower"]), tuple(p["replicas"]), tuple(p["since"]),
                                tuple(p.get("pending", ()))) for p in d["partitions"])
        roster = tuple(RosterEntry(int(a), str(b), bool(c)) for a, b, c in d["roster"])
        return cls(d["version"], d["f"], parts, roster)


@register(25)
@dataclass(frozen=True)
class Chain:
    txn_id: int
    hops: tuple
    config_version: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {h.vs: i for i, h in enumerate(self.hops)})

    def __len__(self):
        return len(self.hops)

    def index(self, vs: VirtualServerId) -> int:
        return self._index[vs]

    def __contains__(self, vs):
        return vs in self._index

    @property
    def head(self) -> Hop:
        return self.hops[0]

    @property
    def tail(self) -> Hop:
        return self.hops[-1]

    @property
    def servers(self) -> list:
        return [h.server for h in self.hops]


def build_chain(payload, config: Configuration) -> Chain:
    """Chain of hops: one subchain of f+1 replicas per touched partition, in key order."""
    keys = payload if isinstance(payload, list) else footprint(payload)
    hops = []
    last = -1
    for k in keys:
        p = config.partition_of(k)
        if p == last:
            continue
        last = p
        for slot, server in enumerate(config.partitions[p].replicas):
            hops.append(Hop(VirtualServerId(p, slot), server))
    txn_id = payload.txn_id if isinstance(payload, TransactionPayload) else 0
    return Chain(txn_id, tuple(hops), config.version)


def next_hop(chain: Chain, vs: VirtualServerId, direction: str):
    i = chain.index(vs)
    if direction == FORWARD:
        if i == len(chain.hops) - 1:
            raise TailHasNoForward(f"{vs} is the tail")
        return chain.hops[i + 1].vs
    if i == 0:
        return CLIENT
    return chain.hops[i - 1].vs


def partition_of(key: SchemaKey, config: Configuration) -> int:
    return config.partition_of(key)


# --- construction ------------------------------------------------------------

def split_bounds(n: int) -> list[bytes]:
    """n lower bounds splitting the byte-string space evenly by leading bytes."""
    if n < 1:
        raise ValueError("need at least one partition per schema")
    width = 1
    while 256 ** width < n:
        width += 1
    space = 256 ** width
    bounds = [b""]
    for i in range(1, n):
        bounds.append((i * space // n).to_bytes(width, "big"))
    return bounds


def _roster(server_ids, addresses):
    addresses = addresses or {}
    return tuple(RosterEntry(s, addresses.get(s, f"s{s}"), True) for s in sorted(server_ids))


def initial_configuration(server_ids, f: int = 1, partitions_per_schema: int = 64, schemas=("default",),
                          addresses: dict | None = None) -> Configuration:
    """Version 1: per-schema range partitions, replicas placed round-robin."""
    ids = sorted(server_ids)
    if f < 0:
        raise ValueError("f must be non-negative")
    if len(ids) < f + 1:
        raise NoReplacementAvailable(f"{len(ids)} servers cannot hold {f + 1} replicas")
    parts = []
    for schema in sorted(schemas):
        for lower in split_bounds(partitions_per_schema):
            i = len(parts)
            reps = tuple(ids[(i + j) % len(ids)] for j in range(f + 1))
            parts.append(Partition(schema, lower, reps, (1,) * (f + 1)))
    return Configuration(1, f, tuple(parts), _roster(ids, addresses))


def range_configuration(ranges, f: int = 0, server_ids=None, addresses: dict | None = None) -> Configuration:
    """Explicit layout: ranges is a list of (schema, lower bound, replica tuple)."""
    parts = []
    for schema, lower, reps in sorted(ranges, key=lambda r: (r[0], r[1])):
        lower = lower.encode() if isinstance(lower, str) else lower
        reps = tuple(reps)
        if len(reps) != f + 1 or len(set(reps)) != len(reps):
            raise ValueError(f"replica set {reps} does not have {f + 1} distinct servers")
        parts.append(Partition(schema, lower, reps, (1,) * len(reps)))
    ids = server_ids if server_ids is not None else sorted({s for _, _, reps in ranges for s in reps})
    return Configuration(1, f, tuple(parts), _roster(ids, addresses))


# --- membership events -------------------------------------------------------

@register(26)
class ServerFail(NamedTuple):
    server_id: int


@register(27)
class ServerJoin(NamedTuple):
    server_id: int
    address: str


@register(28)
class ReplicaReady(NamedTuple):
    server_id: int
    partition: int


def _replace_member(part: Partition, old: int, new: int, version: int) -> Partition:
    keep = [(r, s) for r, s in zip(part.replicas, part.since) if r != old]
    keep.append((new, version))
    pending = tuple(sorted(set(p for p in part.pending if p != old) | {new}))
    return replace(part, replicas=tuple(r for r, _ in keep), since=tuple(s for _, s in keep), pending=pending)


def apply_membership_event(config: Configuration, event) -> Configuration:
    """Next configuration after a failure, a join or a finished replica copy."""
    v = config.version + 1
    live = set(config._live)
    roster = {r.server_id: r for r in config.roster}
    parts = list(config.partitions)

    if isinstance(event, ServerFail):
        sid = event.server_id
        if sid not in roster or not roster[sid].live:
            raise UnknownServer(f"server {sid} is not a live roster member")
        live.discard(sid)
        if len(live) < config.f + 1:
            raise NoReplacementAvailable(f"only {len(live)} live servers for f={config.f}")
        roster[sid] = roster[sid]._replace(live=False)
        for i, part in enumerate(parts):
            if sid not in part.replicas:
                continue
            bearing = [r for r in part.replicas if r != sid and r in live and r not in part.pending]
            if not bearing:
                continue  # no copy of the state survives; frozen until a member returns
            candidates = [s for s in sorted(live) if s not in part.replicas]
            if not candidates:
                raise NoReplacementAvailable(f"no spare server for partition {i}")
            parts[i] = _replace_member(part, sid, candidates[0], v)

    elif isinstance(event, ServerJoin):
        sid = event.server_id
        if sid in roster and roster[sid].live:
            raise ValueError(f"server {sid} is already live")
        roster[sid] = RosterEntry(sid, event.address, True)
        live.add(sid)
        touched = set()
        # partitions that kept dead members while frozen get them replaced now
        for i, part in enumerate(parts):
            for r in list(part.replicas):
                if r in live:
                    continue
                bearing = [x for x in part.replicas if x in live and x not in part.pending]
                candidates = [s for s in sorted(live) if s not in part.replicas]
                if bearing and candidates:
                    part = _replace_member(part, r, candidates[0], v)
                    touched.add(i)
            parts[i] = part
        if config.f >= 1:
            _rebalance(parts, sid, live, v, touched)

    elif isinstance(event, ReplicaReady):
        part = parts[event.partition]
        if event.server_id not in part.pending:
            raise ValueError(f"server {event.server_id} is not recovering partition {event.partition}")
        parts[event.partition] = replace(part, pending=tuple(p for p in part.pending if p != event.server_id))

    else:
        raise TypeError(f"unknown membership event {event!r}")

    return Configuration(v, config.f, tuple(parts), tuple(roster[k] for k in sorted(roster)))


def _rebalance(parts: list, sid: int, live: set, version: int, touched: set):
    load = {s: 0 for s in live}
    for part in parts:
        for r in part.replicas:
            if r in load:
                load[r] += 1
    slots = sum(len(p.replicas) for p in parts)
    target = min(math.ceil(len(parts) / len(live)), slots // len(live))
    excluded = set()
    while load[sid] < target:
        donors = [s for s in live if s != sid and s not in excluded and load[s] > load[sid] + 1]
        if not donors:
            break
        donor = max(donors, key=lambda s: (load[s], -s))
        for i, part in enumerate(parts):
            if (i not in touched and donor in part.replicas and sid not in part.replicas
                    and not part.pending and all(r in live for r in part.replicas)):
                parts[i] = _replace_member(part, donor, sid, version)
                touched.add(i)
                load[donor] -= 1
                load[sid] += 1
                break
        else:
            excluded.add(donor)


def recovery_source(config: Configuration, partition: int, recruit: int):
    """Nearest state-bearing replica ahead of the recruit, else any state-bearing one."""
    part = config.partitions[partition]
    bearing = [r for r in part.replicas if r != recruit and config.is_live(r) and r not in part.pending]
    if not bearing:
        return None
    if recruit in part.replicas:
        pos = part.replicas.index(recruit)
        before = [r for r in part.replicas[:pos] if r in bearing]
        if before:
            return before[-1]
    return bearing[-1]


# --- coordinator ---------------------------------------------------------------

class MemoryBackend:
    """Keeps the event log in memory."""

    def __init__(self):
        self.events = []

    def append(self, event):
        self.events.append(event)

    def load(self):
        return list(self.events)


class FileBackend:
    """Appends events as JSON lines so a restarted coordinator can replay them."""

    def __init__(self, path):
        self.path = path

    def append(self, event):
        rec = {"kind": type(event).__name__, "fields": list(event)}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

    def load(self):
        kinds = {"ServerFail": ServerFail, "ServerJoin": ServerJoin, "ReplicaReady": ReplicaReady}
        try:
            with open(self.path) as fh:
                return [kinds[r["kind"]](*r["fields"]) for r in map(json.loads, fh) if r]
        except FileNotFoundError:
            return []


class Coordinator:
    """Serialises membership events into a sequence of configurations."""

    def __init__(self, initial: Configuration, backend=None):
        self.backend = backend or MemoryBackend()
        self.configs = [initial]
        self.listeners = []
        for ev in self.backend.load():
            self.configs.append(apply_membership_event(self.configs[-1], ev))
        self._waiters: list = []

    @property
    def current(self) -> Configuration:
        return self.configs[-1]

    def subscribe(self, callback):
        self.listeners.append(callback)

    def submit(self, event) -> Configuration:
        new = apply_membership_event(self.current, event)
        self.backend.append(event)
        self.configs.append(new)
        for cb in list(self.listeners):
            cb(new)
        for w in list(self._waiters):
            w.set()
        return new

    def report_fail(self, server_id: int) -> Configuration:
        return self.submit(ServerFail(server_id))

    def join(self, server_id: int, address: str) -> Configuration:
        return self.submit(ServerJoin(server_id, address))

    def replica_ready(self, server_id: int, partition: int) -> Configuration:
        return self.submit(ReplicaReady(server_id, partition))

    def get(self, min_version: int = 0):
        """Newest configuration if it is at least min_version, else None."""
        return self.current if self.current.version >= min_version else None

    async def fetch_configuration(self, min_version: int = 0, timeout: float = 5.0) -> Configuration:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while self.current.version < min_version:
            remaining = deadline - loop.time()
            if remaining <= 0:
                raise ConfigTimeout(f"no configuration at version {min_version}")
            ev = asyncio.Event()
            self._waiters.append(ev)
            try:
                await asyncio.wait_for(ev.wait(), remaining)
            except asyncio.TimeoutError:
                raise ConfigTimeout(f"no configuration at version {min_version}") from None
            finally:
                self._waiters.remove(ev)
        return self.current


class CoordinatorNode:
    """Puts a `Coordinator` on the network and pushes every new configuration to subscribers."""

    def __init__(self, coordinator: Coordinator, net, subscribers=()):
        self.coordinator = coordinator
        self.net = net
        self.subscribers = list(subscribers)
        coordinator.subscribe(self._push)

    def _push(self, config):
        log.info("configuration %d installed", config.version)
        for dst in self.subscribers:
            self.net.send(dst, ConfigResponse(config))

    def deliver(self, src, dst, msg):
        t = type(msg)
        coord = self.coordinator
        try:
            if t is GetConfig:
                self.net.send(src, ConfigResponse(coord.current))
            elif t is Subscribe:
                if msg.endpoint not in self.subscribers:
                    self.subscribers.append(msg.endpoint)
                self.net.send(msg.endpoint, ConfigResponse(coord.current))
            elif t is ReportFail:
                coord.report_fail(msg.server_id)
            elif t is JoinRequest:
                if msg.address not in self.subscribers:
                    self.subscribers.append(msg.address)
                coord.join(msg.server_id, msg.address)
            elif t is RecoveryDone:
                part = coord.current.partitions[msg.partition]
                if msg.server_id in part.pending:
                    coord.replica_ready(msg.server_id, msg.partition)
            else:
                log.warning("coordinator ignoring %s", t.__name__)
        except (UnknownServer, NoReplacementAvailable, ValueError) as e:
            log.warning("coordinator rejected %s: %s", t.__name__, e)
            self.net.send(src, CoordinatorError(f"{t.__name__}: {e}"))
