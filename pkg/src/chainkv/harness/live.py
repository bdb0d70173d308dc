"""Processes for a real cluster over the TCP transport: coordinator, storage server, benchmark driver."""

from __future__ import annotations

import asyncio
import logging
import os

from ..client import Client
from ..mapping import Coordinator, CoordinatorNode, initial_configuration
from ..messages import (ConfigResponse, CoordinatorError, GetConfig, JoinRequest, StatsQuery, StatsReply,
                        Subscribe)
from ..server import FileLog, ServerOptions, StorageServer
from ..transport.wire import WireNet, parse_address
from .metrics import Metrics
from .workload import WorkloadSpec, drive

log = logging.getLogger(__name__)


class _Inbox:
    """Bootstrap node: collects configuration traffic until the real node takes over."""

    def __init__(self):
        self.configs: asyncio.Queue = asyncio.Queue()

    def deliver(self, src, dst, msg):
        if type(msg) in (ConfigResponse, CoordinatorError):
            self.configs.put_nowait(msg)


async def _await_config(inbox: _Inbox, accept, timeout):
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    while True:
        left = deadline - loop.time()
        if left <= 0:
            raise asyncio.TimeoutError("no usable configuration from the coordinator")
        msg = await asyncio.wait_for(inbox.configs.get(), left)
        if type(msg) is CoordinatorError:
            raise RuntimeError(f"coordinator: {msg.message}")
        if accept(msg.config):
            return msg.config


async def start_coordinator(listen: str, servers: dict, f=1, partitions=64, schemas=("default",),
                            on_config=None):
    """Listen on `listen`; `servers` maps server id to 'host:port'. Returns (net, node)."""
    host, port = parse_address(listen)
    config = initial_configuration(servers, f, partitions, schemas, addresses=dict(servers))
    coordinator = Coordinator(config)
    if on_config is not None:
        coordinator.subscribe(on_config)
    net = WireNet(host, port)
    node = CoordinatorNode(coordinator, None, [])
    await net.start(node)
    node.net = net.handle()
    return net, node


class ServerProcess:
    """A `StorageServer` behind a `WireNet`, plus the counters a benchmark asks for."""

    def __init__(self, net: WireNet, server: StorageServer, disk):
        self.net = net
        self.server = server
        self.disk = disk

    def deliver(self, src, dst, msg):
        if type(msg) is StatsQuery:
            hops = tuple((t, self.net.hops_by_txn.get(t, 0)) for t in msg.txn_ids)
            retries = tuple((t, self.server.retries_by_txn.get(t, 0)) for t in msg.txn_ids)
            self.net.send(self.net.address, src, StatsReply(self.server.server_id, hops, retries))
            return
        self.server.deliver(src, dst, msg)

    async def close(self):
        await self.net.close()
        if hasattr(self.disk, "close"):
            self.disk.close()


async def start_server(server_id: int, listen: str, coordinator: str, data_dir=None, timeout=10.0,
                       options: ServerOptions | None = None) -> ServerProcess:
    host, port = parse_address(listen)
    net = WireNet(host, port)
    inbox = _Inbox()
    await net.start(inbox)
    me = net.handle()
    disk = []
    if data_dir is not None:
        os.makedirs(data_dir, exist_ok=True)
        disk = FileLog(os.path.join(data_dir, f"server-{server_id}.log"))
    me.send(coordinator, Subscribe(net.address))

    def member(cfg):
        return any(r.server_id == server_id for r in cfg.roster)

    config = await _await_config(inbox, lambda cfg: True, timeout)
    if not (member(config) and config.is_live(server_id)):
        me.send(coordinator, JoinRequest(server_id, net.address))
        config = await _await_config(inbox, lambda cfg: member(cfg) and cfg.is_live(server_id), timeout)
    if config.address(server_id) != net.address:
        raise RuntimeError(f"server {server_id} is listed at {config.address(server_id)}, not {net.address}")
    opts = options or ServerOptions(coordinator=coordinator)
    srv = StorageServer(server_id, me, config, opts, disk, restarting=bool(disk))
    proc = ServerProcess(net, srv, disk)
    net.node = proc
    # anything that raced in while bootstrapping is covered by the config push and retransmit timers
    return proc


class _Router:
    """Routes deliveries to per-client endpoints 'host:port/cN'."""

    def __init__(self):
        self.clients: dict = {}
        self.stats: asyncio.Queue = asyncio.Queue()
        self.inbox = _Inbox()

    def deliver(self, src, dst, msg):
        t = type(msg)
        if t is StatsReply:
            self.stats.put_nowait(msg)
            return
        c = self.clients.get(dst)
        if c is not None:
            c.deliver(src, dst, msg)
        elif t is ConfigResponse:
            for c in self.clients.values():
                c.deliver(src, dst, msg)
            self.inbox.deliver(src, dst, msg)
        else:
            self.inbox.deliver(src, dst, msg)


async def run_bench(spec: WorkloadSpec, coordinator: str, host="127.0.0.1", timeout=10.0):
    """Run spec's closed loop against a live cluster; returns Metrics with hop counts filled in."""
    net = WireNet(host, 0)
    router = _Router()
    await net.start(router)
    try:
        net.handle().send(coordinator, GetConfig(0))
        config = await _await_config(router.inbox, lambda cfg: True, timeout)
        m = Metrics()
        next_txn = iter(range(spec.duration))
        clients = []
        for i in range(spec.clients):
            h = net.handle(f"c{i}")
            c = Client(h.name, h, config, coordinator, seed=spec.seed * 7919 + i)
            router.clients[h.name] = c
            clients.append(c)
        t0 = net.handle().now()
        await asyncio.gather(*(drive(spec, c, m, next_txn) for c in clients))
        m.elapsed_us = net.handle().now() - t0
        txns = tuple(t for t, _ in m._attempts)
        roster = [r for r in clients[0].config.roster if r.live]
        for r in roster:
            net.handle().send(r.address, StatsQuery(txns))
        hops: dict = {}
        retries: dict = {}
        for _ in roster:
            reply = await asyncio.wait_for(router.stats.get(), timeout)
            for t, n in reply.hops:
                hops[t] = hops.get(t, 0) + n
            for t, n in reply.retries:
                retries[t] = retries.get(t, 0) + n
        for t, n in net.hops_by_txn.items():
            hops[t] = hops.get(t, 0) + n
        m.finish(hops, retries)
        return m
    finally:
        await net.close()
