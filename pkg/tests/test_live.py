import asyncio
import socket

from chainkv.harness.live import run_bench, start_coordinator, start_server
from chainkv.harness.workload import micro


def _ports(n):
    out = []
    for _ in range(n):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            out.append(s.getsockname()[1])
    return out


def test_bench_over_tcp_matches_hop_formula(tmp_path):
    async def go():
        # the coordinator needs real server addresses up front
        servers = {i: f"127.0.0.1:{p}" for i, p in enumerate(_ports(3))}
        cnet, _ = await start_coordinator("127.0.0.1:0", servers, f=1, partitions=16)
        procs = []
        try:
            for sid, addr in servers.items():
                procs.append(await start_server(sid, addr, cnet.address, str(tmp_path)))
            m = await run_bench(micro(4, 1.0, seed=1, duration=20, clients=2, partitions=16), cnet.address)
            return m, [len(p.disk) for p in procs]
        finally:
            for p in procs:
                await p.close()
            await cnet.close()
    m, disk_sizes = asyncio.run(go())
    assert m.committed == 20
    assert sorted(set(m.clean_hops)) == [2 * 4 * 2]
    assert all(n > 0 for n in disk_sizes)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["server-0.log", "server-1.log", "server-2.log"]
