"""Workload specifications, generators and the closed-loop driver."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from ..core import Add, Overwrite, SchemaKey
from ..server import ServerOptions
from .cluster import SimCluster
from .metrics import Metrics


@dataclass(frozen=True)
class Profile:
    """A named transaction shape; `build(rng)` returns an async program over a context."""
    name: str
    build: object
    ops: int = 0


@dataclass
class WorkloadSpec:
    mix: list                     # [(Profile, weight)]
    duration: int = 200           # logical transactions to issue
    seed: int = 0
    txn_size: int = 0
    write_fraction: float = 1.0
    key_space: int = 0
    hot_keys: tuple = ()
    clients: int = 8
    reexec_budget: int = 30
    schemas: tuple = ("default",)
    partitions: int = 64

    def __post_init__(self):
        total = sum(w for _, w in self.mix)
        if self.mix and abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix weights sum to {total}, not 1")
        if not 0.0 <= self.write_fraction <= 1.0:
            raise ValueError("write_fraction must lie in [0, 1]")

    def draw(self, rng: random.Random) -> Profile:
        x = rng.random()
        acc = 0.0
        for prof, w in self.mix:
            acc += w
            if x < acc:
                return prof
        return self.mix[-1][0]


@dataclass
class ClusterParams:
    servers: int = 6
    f: int = 1
    seed: int = 0
    latency_us: tuple = (1000, 5000)
    service_us: int = 0
    codec_check: bool = False
    options: ServerOptions = field(default_factory=ServerOptions)
    protocol: str = "acyclic"       # or "minitxn"
    max_time_us: int = 10 ** 12


async def gather(net, aws):
    tasks = [net.spawn(a) for a in aws]
    return [await t for t in tasks]


# --- mixed read/write workload -------------------------------------------------

def _mixed_key(i):
    # one key per partition: spread the leading byte over the 64 default ranges
    return SchemaKey("default", bytes([(i * 4) % 256, i // 64]))


def mixed(seed=0, duration=200, keys=64, hot=8, hot_fraction=0.5, max_ops=4, write_fraction=0.5,
          clients=8) -> WorkloadSpec:
    """Small random transactions of reads, blind writes and read-modify-writes over a skewed key space."""
    key_list = [_mixed_key(i) for i in range(keys)]
    hot_list = key_list[:hot]

    def build(rng):
        n = rng.randint(1, max_ops)
        picks = []
        for _ in range(n):
            k = rng.choice(hot_list) if rng.random() < hot_fraction else rng.choice(key_list)
            r = rng.random()
            kind = "r" if r >= write_fraction else ("w" if rng.random() < 0.5 else "rmw")
            picks.append((k, kind, rng.getrandbits(16)))

        async def program(ctx):
            for k, kind, v in picks:
                if kind == "r":
                    await ctx.get(k)
                elif kind == "w":
                    ctx.put(k, Overwrite(v))
                else:
                    cur = await ctx.get(k)
                    ctx.put(k, Overwrite((cur if isinstance(cur, int) else 0) + 1))
        return program

    prof = Profile("mixed", build, (1 + max_ops) / 2)
    return WorkloadSpec([(prof, 1.0)], duration, seed, max_ops, write_fraction, keys, tuple(hot_list), clients)


# --- micro-benchmark --------------------------------------------------------------

VALUE_64 = bytes(64)


def micro_key(partition: int, n: int, partitions: int = 64) -> SchemaKey:
    """12-byte key inside the given default-schema partition."""
    width = 1
    while 256 ** width < partitions:
        width += 1
    lead = (partition * 256 ** width // partitions).to_bytes(width, "big")
    return SchemaKey("default", lead + n.to_bytes(12 - width, "big"))


def micro(txn_size=8, write_fraction=1.0, seed=0, duration=200, clients=1, partitions=64,
          keys_per_partition=4096) -> WorkloadSpec:
    """O keys from O distinct partitions; each key is written with probability write_fraction, else read."""
    if txn_size > partitions:
        raise ValueError("txn_size cannot exceed the partition count")

    def build(rng):
        parts = rng.sample(range(partitions), txn_size)
        picks = [(micro_key(p, rng.randrange(keys_per_partition), partitions), rng.random() < write_fraction)
                 for p in parts]

        async def program(ctx):
            reads = [k for k, w in picks if not w]
            if reads:
                await gather(ctx.client.net, [ctx.get(k) for k in reads])
            for k, w in picks:
                if w:
                    ctx.put(k, Overwrite(VALUE_64))
        return program

    prof = Profile(f"micro{txn_size}", build, txn_size)
    return WorkloadSpec([(prof, 1.0)], duration, seed, txn_size, write_fraction, partitions * keys_per_partition,
                        (), clients, partitions=partitions)


# --- TPC-C style contended workload ------------------------------------------------

# Contended tables sort last so their hops sit near the chain tail, where a
# prepared record lives only for a short round trip.
TPCC_SCHEMAS = ("customer", "history", "item", "new_order", "order", "order_line", "stock", "x_district",
                "y_warehouse")
ITEMS = 100_000
CUSTOMERS = 300


def tkey(schema, *ids) -> SchemaKey:
    raw = "/".join(str(i) for i in ids).encode()
    return SchemaKey(schema, hashlib.blake2b(raw, digest_size=4).digest() + raw)


def tpcc_lite(seed=0, warehouses=10, districts=100, duration=20000, clients=32, partitions=8) -> WorkloadSpec:
    """Four TPC-C style profiles over warehouse/district hot spots (no delivery profile)."""
    if districts % warehouses:
        raise ValueError("districts must be a multiple of warehouses")
    per_w = districts // warehouses

    def wid(rng):
        return rng.randrange(warehouses)

    def district(w, d):
        return tkey("x_district", w, d)

    def new_order(rng):
        w = wid(rng)
        d = rng.randrange(per_w)
        c = rng.randrange(CUSTOMERS)
        items = rng.sample(range(ITEMS), 10)
        oid = rng.getrandbits(32)

        async def program(ctx):
            net = ctx.client.net
            await gather(net, [ctx.get(tkey("y_warehouse", w)), ctx.get(tkey("customer", w, d, c))]
                         + [ctx.get(tkey("item", i)) for i in items])
            stock = await gather(net, [ctx.get(tkey("stock", w, i)) for i in items])
            for i, q in zip(items, stock):
                q = q if isinstance(q, int) else 100
                ctx.put(tkey("stock", w, i), Overwrite(q - 1 if q > 10 else q + 90))
            # next order id as an atomic increment; the order key itself is client-unique
            ctx.put(district(w, d), Add(1))
            ctx.put(tkey("order", w, d, oid), Overwrite((c, 10)))
            ctx.put(tkey("new_order", w, d, oid), Overwrite(1))
            ctx.put(tkey("order_line", w, d, oid), Overwrite(tuple(items)))
        return program

    def payment(rng):
        w = wid(rng)
        d = rng.randrange(per_w)
        c = rng.randrange(CUSTOMERS)
        amount = rng.randint(1, 5000)
        hid = rng.getrandbits(32)

        async def program(ctx):
            ctx.put(tkey("y_warehouse", w, "ytd"), Add(amount))
            ctx.put(tkey("x_district", w, d, "ytd"), Add(amount))
            bal = await ctx.get(tkey("customer", w, d, c))
            bal = bal if isinstance(bal, int) else 0
            ctx.put(tkey("customer", w, d, c), Overwrite(bal - amount))
            ctx.put(tkey("history", w, d, c, hid), Overwrite(amount))
        return program

    def order_status(rng):
        w = wid(rng)
        d = rng.randrange(per_w)
        c = rng.randrange(CUSTOMERS)
        orders = [rng.getrandbits(32) for _ in range(11)]

        async def program(ctx):
            await gather(ctx.client.net, [ctx.get(tkey("customer", w, d, c))]
                         + [ctx.get(tkey("order", w, d, o)) for o in orders])
        return program

    def stock_level(rng):
        w = wid(rng)
        d = rng.randrange(per_w)
        items = rng.sample(range(ITEMS), 200)

        async def program(ctx):
            await gather(ctx.client.net, [ctx.get(district(w, d))] + [ctx.get(tkey("stock", w, i)) for i in items])
        return program

    mix = [(Profile("new_order", new_order, 26), 0.45), (Profile("payment", payment, 4), 0.45),
           (Profile("order_status", order_status, 12), 0.05), (Profile("stock_level", stock_level, 201), 0.05)]
    hot = tuple([tkey("y_warehouse", w, "ytd") for w in range(warehouses)]
                + [district(w, d) for w in range(warehouses) for d in range(per_w)])
    return WorkloadSpec(mix, duration, seed, 0, 0.0, 0, hot, clients, 30, TPCC_SCHEMAS, partitions)


# --- driver ----------------------------------------------------------------------------

def txn_rng(spec: WorkloadSpec, i: int) -> random.Random:
    return random.Random(spec.seed * 1_000_003 + i)


def make_cluster(spec: WorkloadSpec, params: ClusterParams) -> SimCluster:
    ext = None
    if params.protocol == "minitxn":
        from .minitxn import server_extensions
        ext = server_extensions()
    elif params.protocol != "acyclic":
        raise ValueError(f"unknown protocol {params.protocol!r}")
    return SimCluster(params.servers, params.f, spec.partitions, params.seed, params.options,
                      latency_us=params.latency_us, service_us=params.service_us, codec_check=params.codec_check,
                      schemas=spec.schemas, extensions=ext)


async def drive(spec: WorkloadSpec, client, m: Metrics, next_txn, note=None):
    """Closed-loop worker: pull transaction numbers until exhausted, re-executing aborts.

    Works over any network handle with `now`, `schedule` and `create_future`,
    so the simulator and the TCP transport share it.
    """
    net = client.net
    for i in next_txn:
        rng = txn_rng(spec, i)
        prof = spec.draw(rng)
        seed = rng.getrandbits(64)
        m.issued += 1
        t0 = net.now()
        outcome = None
        for attempt in range(spec.reexec_budget + 1):
            if attempt:
                m.reexecutions += 1
                # back off a little so re-executions do not collide in lockstep
                fut = net.create_future()
                net.schedule(rng.randint(0, 2000 * min(attempt, 8)), lambda f=fut: f.set_result(None))
                await fut
            ctx = client.begin()
            await prof.build(random.Random(seed))(ctx)
            tc = net.now()
            outcome = await ctx.commit()
            m.attempts += 1
            payload = getattr(ctx, "last_payload", None)
            if payload is not None:
                if note is not None:
                    note(payload, prof)
                m.observe_attempt(payload.txn_id, outcome)
            if outcome.committed:
                m.commit_latency_us.append(net.now() - tc)
                break
            m.attempt_aborts += 1
        m.latency_us.append(net.now() - t0)
        if outcome.committed:
            m.committed += 1
            m.committed_ops += prof.ops
            m.by_profile[prof.name] = m.by_profile.get(prof.name, 0) + 1
        else:
            m.aborted += 1


def run_workload(spec: WorkloadSpec, params: ClusterParams | None = None, cluster: SimCluster | None = None,
                 drain=True):
    """Run spec with closed-loop clients; returns (History, Metrics, cluster)."""
    params = params or ClusterParams(seed=spec.seed)
    if cluster is None:
        cluster = make_cluster(spec, params)
    client_cls = None
    if params.protocol == "minitxn":
        from .minitxn import MiniTxnClient
        client_cls = MiniTxnClient
    m = Metrics()
    sim = cluster.sim
    next_txn = iter(range(spec.duration))
    live = [0]
    start = sim.now

    def note(payload, prof):
        cluster.profile_of[payload.txn_id] = prof.name

    async def worker(client):
        await drive(spec, client, m, next_txn, note)
        live[0] -= 1

    for _ in range(spec.clients):
        if client_cls is None:
            c = cluster.add_client()
        else:
            c = cluster.add_client(cls=client_cls)
        live[0] += 1
        c.net.spawn(worker(c))
    cluster.run(stop=lambda: live[0] == 0, until=start + params.max_time_us)
    m.elapsed_us = sim.now - start
    if drain:
        cluster.run(until=sim.now + 60_000_000)
    m.finish(cluster.sim.hops_by_txn, cluster.retries_by_txn())
    return cluster.history(), m, cluster
