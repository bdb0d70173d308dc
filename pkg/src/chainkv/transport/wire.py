"""TCP transport over asyncio streams.

Frames are a 4-byte big-endian length followed by a canonical-encoded
`Envelope`. Each outbound link keeps every frame until the peer acknowledges
it, so a broken connection is re-established and the unacknowledged tail is
re-sent in order. Receivers drop frames they already delivered, keyed by the
sender's session id, which keeps links FIFO and exactly-once across reconnects.
"""

from __future__ import annotations

import asyncio
import logging
import random
import struct
import time
from collections import Counter, deque

from ..codec import CodecError, decode, encode
from ..messages import Envelope
from .sim import HOP_MESSAGES, txn_of

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
MAX_FRAME = 64 << 20
_HELLO = "hello"
_ACK = "ack"


def split_endpoint(endpoint: str):
    """'host:port/vid' -> ('host:port', 'vid' or None)."""
    addr, _, vid = endpoint.partition("/")
    return addr, (vid or None)


def parse_address(addr: str):
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected host:port")
    return host, int(port)


async def read_frame(reader: asyncio.StreamReader):
    head = await reader.readexactly(4)
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise CodecError(f"frame of {n} bytes exceeds limit")
    return decode(await reader.readexactly(n))


def frame(env: Envelope) -> bytes:
    body = encode(env)
    return _LEN.pack(len(body)) + body


class _Link:
    """Outbound stream to one peer address."""

    def __init__(self, net: "WireNet", addr: str):
        self.net = net
        self.addr = addr
        self.seq = 0
        self.unacked: deque = deque()      # (seq, bytes)
        self.wake = asyncio.Event()
        self.task = asyncio.get_running_loop().create_task(self._run())

    def push(self, src, dst, msg):
        self.seq += 1
        self.unacked.append((self.seq, frame(Envelope(src, dst, self.seq, msg))))
        self.wake.set()

    def ack(self, upto):
        while self.unacked and self.unacked[0][0] <= upto:
            self.unacked.popleft()

    async def _run(self):
        backoff = 0.05
        while not self.net.closed:
            try:
                host, port = parse_address(self.addr)
                reader, writer = await asyncio.open_connection(host, port)
            except OSError:
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            backoff = 0.05
            acks = asyncio.get_running_loop().create_task(self._read_acks(reader))
            try:
                writer.write(frame(Envelope(self.net.address, self.addr, 0, (_HELLO, self.net.session))))
                sent = 0
                while not self.net.closed:
                    # resend everything the peer has not acknowledged, then stream new frames
                    pending = [b for s, b in self.unacked if s > sent]
                    for b in pending:
                        writer.write(b)
                    if self.unacked:
                        sent = self.unacked[-1][0]
                    await writer.drain()
                    if acks.done():
                        break
                    self.wake.clear()
                    if not any(s > sent for s, _ in self.unacked):
                        waiter = asyncio.ensure_future(self.wake.wait())
                        await asyncio.wait({waiter, acks}, return_when=asyncio.FIRST_COMPLETED)
                        waiter.cancel()
                        if acks.done():
                            break
            except (OSError, ConnectionError):
                pass
            finally:
                acks.cancel()
                writer.close()
            if not self.net.closed:
                log.info("link to %s broke; reconnecting", self.addr)
                await asyncio.sleep(backoff)

    async def _read_acks(self, reader):
        try:
            while True:
                env = await read_frame(reader)
                if isinstance(env.body, tuple) and env.body and env.body[0] == _ACK:
                    self.ack(env.seq)
        except (asyncio.IncompleteReadError, OSError, CodecError):
            return


class WireHandle:
    """Same surface as the simulator's handle: send, now, schedule, futures, tasks."""

    def __init__(self, net: "WireNet", name: str):
        self.net = net
        self.name = name

    def send(self, dst, msg):
        self.net.send(self.name, dst, msg)

    def now(self):
        return int(time.monotonic() * 1_000_000)

    def schedule(self, delay_us, fn):
        self.net.loop.call_later(max(0, delay_us) / 1e6, fn)

    def create_future(self):
        return self.net.loop.create_future()

    def spawn(self, coro):
        return self.net.loop.create_task(coro)


class WireNet:
    """One listening socket per process; `node.deliver(src, dst, msg)` receives everything."""

    def __init__(self, host="127.0.0.1", port=0):
        self.host = host
        self.port = port
        self.node = None
        self.links: dict[str, _Link] = {}
        self.delivered: dict = {}          # (peer address, session) -> last seq
        self.server = None
        self.closed = False
        self.session = random.getrandbits(63)
        self.loop = None
        self.hops_by_txn: Counter = Counter()

    @property
    def address(self):
        return f"{self.host}:{self.port}"

    def handle(self, suffix: str | None = None) -> WireHandle:
        """A sending handle; with a suffix the handle speaks as 'host:port/suffix'."""
        return WireHandle(self, self.address if suffix is None else f"{self.address}/{suffix}")

    async def start(self, node=None):
        self.loop = asyncio.get_running_loop()
        self.node = node
        self.server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self.server.sockets[0].getsockname()[1]
        return self

    async def close(self):
        self.closed = True
        for link in self.links.values():
            link.wake.set()
            link.task.cancel()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()

    def send(self, src: str, dst: str, msg):
        if type(msg) in HOP_MESSAGES:
            self.hops_by_txn[txn_of(msg)] += 1
        addr, _ = split_endpoint(dst)
        if addr == self.address:
            # loopback still goes through the codec so local and remote delivery agree
            body = decode(encode(msg))
            self.loop.call_soon(self._local, src, dst, body)
            return
        link = self.links.get(addr)
        if link is None:
            link = self.links[addr] = _Link(self, addr)
        link.push(src, dst, msg)

    def _local(self, src, dst, body):
        if self.node is not None and not self.closed:
            self.node.deliver(src, dst, body)

    async def _serve(self, reader, writer):
        peer = None
        try:
            hello = await read_frame(reader)
            if not (isinstance(hello.body, tuple) and hello.body[0] == _HELLO):
                raise CodecError("connection did not start with hello")
            peer = (hello.src, hello.body[1])
            while True:
                env = await read_frame(reader)
                last = self.delivered.get(peer, 0)
                if env.seq <= last:
                    continue
                self.delivered[peer] = env.seq
                if self.node is not None:
                    try:
                        self.node.deliver(env.src, env.dst, env.body)
                    except Exception:
                        log.exception("handler failed for %s", type(env.body).__name__)
                writer.write(frame(Envelope(self.address, env.src, env.seq, (_ACK,))))
                if writer.transport.get_write_buffer_size() > 1 << 20:
                    await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        except CodecError as e:
            log.warning("dropping connection from %s: %s", peer, e)
        finally:
            writer.close()
