"""A simulated cluster: coordinator node, storage servers, clients and invariant checks."""

from __future__ import annotations

import logging

from ..client import Client
from ..mapping import (Configuration, Coordinator, CoordinatorNode, NoReplacementAvailable, UnknownServer,
                       initial_configuration)
from ..messages import JoinRequest
from ..server import ServerOptions, StorageServer
from ..transport.sim import Simulator
from .history import History, TxnEntry

log = logging.getLogger(__name__)

COORD = "coord"


class SimCluster:
    """Servers, coordinator and clients on one `Simulator`.

    Crashed servers are reported to the coordinator after `detect_us`; a
    recovered server restarts from its durable log and rejoins.
    """

    def __init__(self, n_servers=6, f=1, partitions=64, seed=0, options: ServerOptions | None = None,
                 config: Configuration | None = None, latency_us=(1000, 5000), service_us=0,
                 codec_check=False, detect_us=100_000, schemas=("default",), extensions=None):
        self.sim = Simulator(seed, latency_us=latency_us, service_us=service_us, codec_check=codec_check)
        if config is None:
            config = initial_configuration(range(n_servers), f, partitions, schemas)
        self.options = options or ServerOptions()
        self.extensions = extensions
        self.coordinator = Coordinator(config)
        self.coord_node = CoordinatorNode(self.coordinator, self.sim.handle(COORD))
        self.sim.register(COORD, self.coord_node)
        self.detect_us = detect_us
        self.servers: dict[int, StorageServer] = {}
        self.disks: dict[int, list] = {}
        self.clients: list[Client] = []
        self.attempts: list = []          # (payload, outcome, time, profile)
        self.profile_of: dict = {}
        for r in config.roster:
            self.disks[r.server_id] = []
            handle = self.sim.register(r.address, None)
            srv = StorageServer(r.server_id, handle, config, self.options, self.disks[r.server_id],
                                self.extensions)
            self.sim.nodes[r.address] = srv
            self.servers[r.server_id] = srv
            self.coord_node.subscribers.append(r.address)
        self.sim.on_crash = self._on_crash
        self.sim.on_recover = self._on_recover

    @property
    def config(self) -> Configuration:
        return self.coordinator.current

    def _sid(self, name):
        for sid, srv in self.servers.items():
            if srv.address == name:
                return sid
        raise KeyError(name)

    # -- clients -------------------------------------------------------------

    def add_client(self, name=None, cls=Client, **kw) -> Client:
        name = name or f"c{len(self.clients)}"
        handle = self.sim.register(name, None)
        kw.setdefault("seed", self.sim.rng.getrandbits(64))
        c = cls(name, handle, self.config, COORD, **kw)
        c.on_reply = self._record
        self.sim.nodes[name] = c
        self.clients.append(c)
        self.coord_node.subscribers.append(name)
        return c

    def _record(self, payload, outcome):
        self.attempts.append((payload, outcome, self.sim.now))

    # -- faults --------------------------------------------------------------

    def crash(self, sid: int):
        self.sim.crash(self.servers[sid].address)

    def _on_crash(self, name):
        if name == COORD or name not in {s.address for s in self.servers.values()}:
            return
        sid = self._sid(name)

        def detect():
            if name in self.sim.dead and self.config.is_live(sid):
                try:
                    self.coordinator.report_fail(sid)
                except (NoReplacementAvailable, UnknownServer) as e:
                    log.warning("cannot replace server %d: %s", sid, e)
        self.sim.call_at(self.sim.now + self.detect_us, detect)

    def _on_recover(self, name):
        if name not in self.sim.dead:
            return
        sid = self._sid(name)
        handle = self.sim.register(name, None)
        srv = StorageServer(sid, handle, self.config, self.options, self.disks[sid], self.extensions,
                            restarting=True)
        self.servers[sid] = srv
        self.sim.nodes[name] = srv
        if not self.config.is_live(sid):
            handle.send(COORD, JoinRequest(sid, name))

    # -- running -------------------------------------------------------------

    def run(self, until=None, stop=None, max_events=None):
        return self.sim.run(until=until, stop=stop, max_events=max_events)

    def spawn(self, coro):
        return self.sim.handle(COORD).spawn(coro)

    # -- observation ---------------------------------------------------------

    def applied(self):
        """(txn, key) -> version from every durable apply record, and any disagreements."""
        where: dict = {}
        problems = []
        for sid, disk in self.disks.items():
            for entry in disk:
                if entry[0] != "a":
                    continue
                a = entry[2]
                prev = where.setdefault((a.txn_id, a.key), a.version)
                if prev != a.version:
                    problems.append(f"txn {a.txn_id:x} wrote {a.key} as version {prev} and {a.version}")
        return where, problems

    def history(self) -> History:
        where, _ = self.applied()
        h = History()
        for payload, outcome, t in self.attempts:
            writes = tuple((w.key, where.get((payload.txn_id, w.key), 0)) for w in payload.writes)
            h.add(TxnEntry(payload.txn_id, tuple((r.key, r.version) for r in payload.reads), writes,
                           outcome.committed, t, self.profile_of.get(payload.txn_id, "")))
        return h

    def check_invariants(self, quiescent=True) -> list:
        """Server-side invariants; the quiescent checks assume no message is in flight."""
        out = []
        for sid, srv in sorted(self.servers.items()):
            out.extend(f"server {sid}: {v}" for v in srv.violations)
        where, problems = self.applied()
        out.extend(problems)
        owner: dict = {}
        for (txn, key), ver in where.items():
            other = owner.setdefault((key, ver), txn)
            if other != txn:
                out.append(f"version {ver} of {key} applied by {other:x} and {txn:x}")
        out.extend(self._apply_order())
        outcomes = {}
        for payload, outcome, _ in self.attempts:
            outcomes[payload.txn_id] = (payload, outcome.committed)
        for txn, (payload, committed) in outcomes.items():
            if not committed and any((txn, w.key) in where for w in payload.writes):
                out.append(f"aborted txn {txn:x} has applied writes")
            if committed and quiescent:
                missing = [w.key for w in payload.writes if (txn, w.key) not in where]
                if missing:
                    out.append(f"committed txn {txn:x} never applied {missing}")
        if quiescent:
            out.extend(self._replica_agreement())
        return out

    def _apply_order(self):
        """Per replica and key: versions consecutive and tokens increasing, between state resets."""
        out = []
        for sid, disk in self.disks.items():
            last: dict = {}
            for entry in disk:
                if entry[0] == "reset":
                    for k in [k for k in last if k[0] == entry[1]]:
                        del last[k]
                elif entry[0] == "a":
                    a = entry[2]
                    prev = last.get((entry[1], a.key))
                    if prev is not None:
                        if a.version != prev.version + 1:
                            out.append(f"server {sid}: {a.key} jumped from {prev.version} to {a.version}")
                        if a.token is not None and prev.token is not None and not a.token > prev.token:
                            out.append(f"server {sid}: {a.key} applied token {a.token} after {prev.token}")
                    last[(entry[1], a.key)] = a
        return out

    def _replica_agreement(self):
        out = []
        cfg = self.config
        for p, part in enumerate(cfg.partitions):
            states = []
            for sid in part.replicas:
                srv = self.servers.get(sid)
                if srv is None or not cfg.is_live(sid) or srv.address in self.sim.dead:
                    continue
                vs = srv.vss.get(p)
                if vs is None or not vs.ready:
                    continue
                states.append((sid, {k: (ks.value, ks.version) for k, ks in vs.keys.items() if ks.version}))
            for sid, st in states[1:]:
                if st != states[0][1]:
                    out.append(f"partition {p}: replicas {states[0][0]} and {sid} disagree")
        return out

    def retries_by_txn(self) -> dict:
        out: dict = {}
        for srv in self.servers.values():
            for t, n in srv.retries_by_txn.items():
                out[t] = out.get(t, 0) + n
        return out

    def pending(self):
        """Unresolved protocol state anywhere in the cluster."""
        n = 0
        for srv in self.servers.values():
            if srv.address in self.sim.dead:
                continue
            for vs in srv.vss.values():
                n += len(vs.records) + len(vs.aborting)
        return n
