"""Exhaustive search over message delivery orders for small scenarios.

Every link is a FIFO queue, so a schedule is a sequence of link choices. The
search explores them depth-first, snapshotting the whole world with deepcopy
at each branch and skipping worlds whose fingerprint was already explored.
Each finished schedule is checked with the serializability oracle and the
server-side invariants.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from ..core import Overwrite, ReadRecord, SchemaKey, TransactionPayload, WriteRecord
from ..mapping import range_configuration
from ..messages import ClientReply, Forward
from ..server import ServerOptions, StorageServer
from ..transport.sim import ManualNetwork
from .history import History, TxnEntry, check_serializable


@dataclass
class Scenario:
    name: str
    config: object
    txns: list                 # TransactionPayload, all submitted at time zero
    options: ServerOptions = field(default_factory=ServerOptions)


@dataclass(frozen=True)
class SearchOk:
    schedules: int
    states: int
    exhaustive: bool
    committed_all: int = 0     # schedules in which every transaction committed

    def __bool__(self):
        return True


@dataclass(frozen=True)
class Violation:
    reason: str
    trace: tuple               # link choices; feed to `replay`
    cycle: bool = False        # the oracle found a serialization cycle
    found: int = 1             # failing schedules seen when the search kept going

    def __bool__(self):
        return False


class _ClientStub:
    def __init__(self):
        self.outcomes = {}

    def deliver(self, src, dst, msg):
        if type(msg) is ClientReply:
            prev = self.outcomes.setdefault(msg.txn_id, msg.committed)
            if prev != msg.committed:
                self.outcomes[msg.txn_id] = "conflicting replies"


class World:
    def __init__(self, sc: Scenario):
        self.net = ManualNetwork()
        self.servers = {}
        cfg = sc.config
        for r in cfg.roster:
            srv = StorageServer(r.server_id, self.net.handle(r.address), cfg, sc.options)
            self.net.register(r.address, srv)
            self.servers[r.server_id] = srv
        self.clients = {}
        for i, p in enumerate(sc.txns):
            name = f"c{i}"
            stub = _ClientStub()
            self.clients[p.txn_id] = stub
            self.net.register(name, stub)
            head = cfg.chain_for(p).hops[0]
            self.net.send(name, cfg.endpoint(head.server, head.vs.partition), Forward(cfg.version, p, name))
        self.trace = []

    def step(self, link):
        self.trace.append(link)
        self.net.deliver(link)

    def fingerprint(self):
        servers = tuple(s.fingerprint() for _, s in sorted(self.servers.items()))
        outs = tuple(sorted((t, c.outcomes.get(t)) for t, c in self.clients.items()))
        return (servers, self.net.in_flight(), outs)


def _check_final(world: World, sc: Scenario):
    """(reason, is_cycle) for the first problem in a finished schedule, else None."""
    cyc = _cycle(world, sc)
    if cyc is not None:
        return cyc, True
    reason = _invariants(world, sc)
    return None if reason is None else (reason, False)


def _written(world):
    out = {}
    for srv in world.servers.values():
        for vs in srv.vss.values():
            for a in vs.apply_log:
                out.setdefault((a.txn_id, a.key), a.version)
    return out


def _cycle(world, sc):
    written = _written(world)
    h = History()
    for p in sc.txns:
        committed = world.clients[p.txn_id].outcomes.get(p.txn_id) is True
        h.add(TxnEntry(p.txn_id, tuple((r.key, r.version) for r in p.reads),
                       tuple((w.key, written.get((p.txn_id, w.key), 0)) for w in p.writes), committed))
    res = check_serializable(h)
    if not res:
        return "serialization cycle " + " -> ".join(f"{t:x}" for t in res.txns)
    return None


def _invariants(world, sc):
    for srv in world.servers.values():
        if srv.violations:
            return srv.violations[0]
    for t, c in world.clients.items():
        o = c.outcomes.get(t)
        if o is None:
            return f"txn {t:x} never got an outcome"
        if o == "conflicting replies":
            return f"txn {t:x} got both commit and abort"
    written = {}
    for srv in world.servers.values():
        for vs in srv.vss.values():
            last = {}
            for a in vs.apply_log:
                prev = written.setdefault((a.txn_id, a.key), a.version)
                if prev != a.version:
                    return f"replicas disagree on the version txn {a.txn_id:x} wrote to {a.key}"
                lt = last.get(a.key)
                if lt is not None and not a.token > lt:
                    return f"{a.key} applied token {a.token} after {lt}"
                last[a.key] = a.token
    for p in sc.txns:
        committed = world.clients[p.txn_id].outcomes[p.txn_id] is True
        if not committed and any((p.txn_id, w.key) in written for w in p.writes):
            return f"aborted txn {p.txn_id:x} has applied writes"
        if committed and any((p.txn_id, w.key) not in written for w in p.writes):
            return f"committed txn {p.txn_id:x} was not applied everywhere"
    return None


def interleaving_search(sc: Scenario, bound: int | None = None, keep_going: bool = False):
    """Depth-first search over delivery orders; Ok or a Violation.

    With keep_going the search finishes and reports the first serialization
    cycle if any schedule produced one, else the first invariant failure.
    """
    root = World(sc)
    seen = set()
    stack = [root]
    schedules = 0
    all_commit = 0
    states = 0
    bad = []
    while stack:
        w = stack.pop()
        fp = w.fingerprint()
        if fp in seen:
            continue
        seen.add(fp)
        states += 1
        links = w.net.enabled()
        if not links:
            schedules += 1
            problem = _check_final(w, sc)
            if problem is not None:
                v = Violation(problem[0], tuple(w.trace), problem[1])
                if not keep_going:
                    return v
                bad.append(v)
            if all(c.outcomes.get(t) is True for t, c in w.clients.items()):
                all_commit += 1
            if bound is not None and schedules >= bound:
                break
            continue
        for link in reversed(links):
            nxt = copy.deepcopy(w) if link is not links[0] else w
            nxt.step(link)
            stack.append(nxt)
    if bad:
        first = next((v for v in bad if v.cycle), bad[0])
        return Violation(first.reason, first.trace, first.cycle, len(bad))
    return SearchOk(schedules, states, not stack, all_commit)


def replay(sc: Scenario, trace):
    """Re-run one schedule; returns the finished world and the failure reason (or None)."""
    w = World(sc)
    for link in trace:
        w.step(link)
    problem = _check_final(w, sc)
    return w, None if problem is None else problem[0]


# --- canned scenarios ----------------------------------------------------------------

def _layout(names, f, n_servers=None):
    """One partition per key name, replicas placed round-robin over n servers."""
    n = n_servers or max(len(names), f + 1)
    ranges = []
    for i, name in enumerate(names):
        reps = tuple((i + j) % n for j in range(f + 1))
        ranges.append(("default", name.encode() if i else b"", reps))
    return range_configuration(ranges, f, list(range(n)))


def _k(name):
    return SchemaKey("default", name.encode())


def cycle_scenario(f=0, order_check=True) -> Scenario:
    """Three blind-write transactions on key pairs (A,B), (B,C), (C,A), one key per server."""
    cfg = _layout(["A", "B", "C"], f)
    pairs = [("A", "B"), ("B", "C"), ("C", "A")]
    txns = [TransactionPayload(i + 1, (), tuple(WriteRecord(_k(x), Overwrite(i + 1)) for x in sorted(pair)))
            for i, pair in enumerate(pairs)]
    return Scenario("cycle" + ("" if order_check else "-unordered"), cfg, txns,
                    ServerOptions(order_check=order_check))


def overlap_scenario(f=0) -> Scenario:
    """T1 reads H and writes A; T2 reads P and T; T3 writes all four keys."""
    cfg = _layout(["A", "H", "P", "T"], f)
    t1 = TransactionPayload(1, (ReadRecord(_k("H"), 0),), (WriteRecord(_k("A"), Overwrite(1)),))
    t2 = TransactionPayload(2, (ReadRecord(_k("P"), 0), ReadRecord(_k("T"), 0)), ())
    t3 = TransactionPayload(3, (), tuple(WriteRecord(_k(x), Overwrite(3)) for x in "AHPT"))
    return Scenario("overlap", cfg, [t1, t2, t3])


def read_write_cycle_scenario(f=0, order_check=True) -> Scenario:
    """Each transaction reads one key of its pair and writes the other, closing a read-write ring."""
    cfg = _layout(["A", "B", "C"], f)
    specs = [("A", "B"), ("B", "C"), ("C", "A")]
    txns = [TransactionPayload(i + 1, (ReadRecord(_k(r), 0),), (WriteRecord(_k(w), Overwrite(i + 1)),))
            for i, (r, w) in enumerate(specs)]
    return Scenario("rw-ring", cfg, txns, ServerOptions(order_check=order_check))


SCENARIOS = {"cycle": cycle_scenario, "overlap": overlap_scenario, "rw-ring": read_write_cycle_scenario}
