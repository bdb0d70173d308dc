"""Storage server: committed store, prepared-transaction table and the commit pipeline.

A `StorageServer` is one physical process. It hosts one `VirtualServer` per
partition it replicates and routes each message to the right one. All
protocol decisions (validation, token ordering, retry, abort, commit and
deferred write application) live in `VirtualServer`.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

from .codec import CodecError, decode, encode, register
from .core import (ABSENT, MediatorToken, SchemaKey, TokenCounter, TransactionPayload, TypeMismatch,
                   WriteRecord, apply_atomic, result_tag, tag_of)
from .mapping import Configuration, VirtualServerId, recovery_source
from .messages import (AbortBackward, AbortForward, AbortReason, ClientReply, CommitBackward, ConfigResponse,
                       Forward, GetConfig, Read, ReadReply, RecoverReply, RecoverRequest, RecoveryDone,
                       RetryBackward, StatusQuery, StatusReply, WrongServer)

log = logging.getLogger(__name__)

RETRY_BUDGET = 50


class FileLog(list):
    """Durable log backed by an append-only file of length-prefixed encoded entries.

    Loading stops at the first torn or undecodable record, which is where a
    crash mid-append leaves the file.
    """

    _LEN = struct.Struct(">I")

    def __init__(self, path, fsync=False):
        super().__init__()
        self.path = path
        self.fsync = fsync
        good = 0
        if os.path.exists(path):
            with open(path, "rb") as fh:
                data = fh.read()
            pos = 0
            while pos + 4 <= len(data):
                (n,) = self._LEN.unpack_from(data, pos)
                if pos + 4 + n > len(data):
                    break
                try:
                    super().append(decode(data[pos + 4:pos + 4 + n]))
                except CodecError:
                    break
                pos += 4 + n
            good = pos
        self._fh = open(path, "r+b" if os.path.exists(path) else "wb")
        self._fh.truncate(good)
        self._fh.seek(good)

    def append(self, entry):
        body = encode(entry)
        self._fh.write(self._LEN.pack(len(body)) + body)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        super().append(entry)

    def close(self):
        self._fh.close()


class WrongServerError(Exception):
    def __init__(self, config_version):
        super().__init__(f"not the owner under configuration {config_version}")
        self.config_version = config_version


class SourceUnavailable(Exception):
    pass


@register(30)
class KeyState(NamedTuple):
    value: object
    version: int
    max_seen: MediatorToken | None


EMPTY_KEY = KeyState(ABSENT, 0, None)


@register(31)
class ApplyRecord(NamedTuple):
    txn_id: int
    key: SchemaKey
    value: object
    version: int
    token: MediatorToken | None


class Phase(enum.Enum):
    PREPARED = "prepared"
    COMMIT_PENDING = "commit_pending"


@dataclass(slots=True)
class TxnRecord:
    payload: TransactionPayload
    client: str
    token: MediatorToken
    phase: Phase
    reads: tuple
    writes: tuple
    keys: tuple
    superseded: bool = False
    sent_at: int = 0

    @property
    def txn_id(self):
        return self.payload.txn_id

    def snapshot(self):
        return (self.payload, self.client, self.token, self.phase.value, self.superseded)


@dataclass
class ServerOptions:
    order_check: bool = True          # only test fixtures turn this off
    retry_budget: int = RETRY_BUDGET
    rto_us: int = 10_000_000          # retransmit after this long without an outcome
    sweep_us: int = 2_000_000
    recover_retry_us: int = 500_000
    coordinator: str = "coord"


def local_parts(payload: TransactionPayload, config: Configuration, partition: int):
    reads = tuple(r for r in payload.reads if config.partition_of(r.key) == partition)
    writes = tuple(w for w in payload.writes if config.partition_of(w.key) == partition)
    keys = tuple(sorted({r.key for r in reads} | {w.key for w in writes}))
    return reads, writes, keys


class VirtualServer:
    """State and protocol logic for one partition replica."""

    def __init__(self, host: "StorageServer", partition: int, slot: int = 0):
        self.host = host
        self.partition = partition
        self.slot = slot
        self.keys: dict[SchemaKey, KeyState] = {}
        self.records: dict[int, TxnRecord] = {}
        self.completed: dict[int, tuple] = {}       # txn -> (committed, reason, token)
        self.retried: dict[int, tuple] = {}         # txn -> (payload, client, token, floor) at the detecting hop
        self.aborting: dict[int, tuple] = {}        # txn -> (payload, client, reason, sent_at)
        self.highest: dict[int, MediatorToken] = {}
        self.attempts: dict[int, int] = {}
        self.writers: dict[SchemaKey, set] = {}
        self.readers: dict[SchemaKey, set] = {}
        self.apply_log: list[ApplyRecord] = []
        self.ready = True
        self.valid_version = 0
        self.buffer: list = []
        self.recover_from = None
        self.recover_asked_at = 0
        self.extension_state: dict = {}
        self._dirty_keys: set = set()
        self._dirty_txns: set = set()

    # -- helpers --------------------------------------------------------------

    @property
    def vid(self):
        return VirtualServerId(self.partition, self.slot)

    def key_state(self, key) -> KeyState:
        return self.keys.get(key, EMPTY_KEY)

    def _set_key(self, key, ks):
        self.keys[key] = ks
        self._dirty_keys.add(key)

    def _index(self, rec: TxnRecord):
        t = rec.txn_id
        for r in rec.reads:
            self.readers.setdefault(r.key, set()).add(t)
        for w in rec.writes:
            self.writers.setdefault(w.key, set()).add(t)

    def _unindex(self, rec: TxnRecord):
        t = rec.txn_id
        for r in rec.reads:
            s = self.readers.get(r.key)
            if s is not None:
                s.discard(t)
                if not s:
                    del self.readers[r.key]
        for w in rec.writes:
            s = self.writers.get(w.key)
            if s is not None:
                s.discard(t)
                if not s:
                    del self.writers[w.key]

    def _finish(self, txn, committed, reason, token):
        rec = self.records.pop(txn, None)
        if rec is not None:
            self._unindex(rec)
        self.completed[txn] = (committed, reason, token)
        self.retried.pop(txn, None)
        self.highest.pop(txn, None)
        self.attempts.pop(txn, None)
        self._dirty_txns.add(txn)

    def _send(self, dst, msg):
        self.host.send(dst, msg)

    def _hop_endpoint(self, chain, i):
        h = chain.hops[i]
        return self.host.config.endpoint(h.server, h.vs.partition)

    def _position(self, payload):
        chain = self.host.config.chain_for(payload)
        i = chain._index.get(self.vid)
        return chain, i

    def _send_back(self, chain, i, msg, client_reply):
        if i == 0:
            self._send(msg.client, client_reply)
        else:
            self._send(self._hop_endpoint(chain, i - 1), msg)

    def pending_work(self):
        return bool(self.records or self.retried or self.aborting)

    # -- reads ----------------------------------------------------------------

    def local_read(self, key: SchemaKey):
        """Committed (value, version); prepared writes are never visible."""
        if self.host.config.partition_of(key) != self.partition:
            raise WrongServerError(self.host.config.version)
        ks = self.keys.get(key, EMPTY_KEY)
        return ks.value, ks.version

    # -- validation and ordering -------------------------------------------------

    def validate(self, txn, reads, writes):
        """None when valid, else the AbortReason."""
        for r in reads:
            if self.keys.get(r.key, EMPTY_KEY).version != r.version:
                return AbortReason.STALE_READ
            ws = self.writers.get(r.key)
            if ws and (len(ws) > 1 or txn not in ws):
                return AbortReason.CONFLICT
        for w in writes:
            rs = self.readers.get(w.key)
            if rs and (len(rs) > 1 or txn not in rs):
                return AbortReason.CONFLICT
            if not self._type_ok(txn, w):
                return AbortReason.TYPE_MISMATCH
        return None

    def _type_ok(self, txn, w: WriteRecord):
        op = w.op
        tags = {tag_of(self.keys.get(w.key, EMPTY_KEY).value)}
        for other in self.writers.get(w.key, ()):
            if other == txn:
                continue
            rec = self.records[other]
            for ow in rec.writes:
                if ow.key == w.key:
                    new = set()
                    for t in tags:
                        try:
                            new.add(result_tag(t, ow.op))
                        except TypeMismatch:
                            pass
                    tags |= new
        try:
            for t in tags:
                result_tag(t, op)
        except TypeMismatch:
            return False
        return True

    def order_check(self, token: MediatorToken, keys):
        """None when token exceeds every local max_seen, else the largest offender."""
        floor = None
        for k in keys:
            ms = self.keys.get(k, EMPTY_KEY).max_seen
            if ms is not None and not token > ms and (floor is None or ms > floor):
                floor = ms
        return floor

    # -- forward pass -----------------------------------------------------------

    def handle_forward(self, src, msg: Forward):
        payload = msg.payload
        txn = payload.txn_id
        chain, i = self._position(payload)
        if i is None:
            return
        last = len(chain.hops) - 1
        done = self.completed.get(txn)
        if done is not None:
            self._reemit_outcome(chain, i, payload, msg.client, done)
            return
        rec = self.records.get(txn)
        token = msg.token
        if token is None:
            if i != 0:
                self._send(src, WrongServer(self.host.config.version, msg))
                return
            if rec is not None:
                # the client retransmitted; resume the current pass
                self._resend_current(chain, i, rec)
                return
            token = self.host.counter.generate(self.host.server_id, txn)
            fresh = True
        else:
            fresh = txn not in self.highest and rec is None and txn not in self.retried
            self.host.counter.observe(token)
            hi = self.highest.get(txn)
            if hi is not None:
                if token < hi:
                    return  # stale pass
                if token == hi:
                    if txn in self.retried:
                        _, client, t, floor = self.retried[txn]
                        self._send_back(chain, i, RetryBackward(self.host.config.version, payload, client, t, floor),
                                        None)
                    elif rec is not None and rec.token == token:
                        self._resend_current(chain, i, rec)
                    return
        self._new_pass(chain, i, last, payload, msg.client, token, fresh)

    def _resend_current(self, chain, i, rec: TxnRecord):
        last = len(chain.hops) - 1
        cv = self.host.config.version
        if rec.phase is Phase.COMMIT_PENDING:
            if i == last:
                m = CommitBackward(cv, rec.payload, rec.client, rec.token)
                self._send_back(chain, i, m, ClientReply(rec.txn_id, True))
        elif not rec.superseded and i == last:
            self._decide_at_tail(chain, i, rec)
        elif not rec.superseded:
            rec.sent_at = self.host.now()
            self._send(self._hop_endpoint(chain, i + 1), Forward(cv, rec.payload, rec.client, rec.token))

    def _decide_at_tail(self, chain, i, rec: TxnRecord):
        # A replica that became the tail by reconfiguration can hold a record
        # prepared under an older chain. It was validated then and still holds
        # its reader/writer entries, so committing it now is safe.
        rec.phase = Phase.COMMIT_PENDING
        self._dirty_txns.add(rec.txn_id)
        self._send_back(chain, i, CommitBackward(self.host.config.version, rec.payload, rec.client, rec.token),
                        ClientReply(rec.txn_id, True))
        self.try_apply()

    def _new_pass(self, chain, i, last, payload, client, token, fresh=False):
        txn = payload.txn_id
        self.highest[txn] = token
        rec = self.records.get(txn)
        if rec is not None:
            reads, writes, keys = rec.reads, rec.writes, rec.keys
        else:
            reads, writes, keys = local_parts(payload, self.host.config, self.partition)
        reason = self.validate(txn, reads, writes)
        if reason is not None:
            self._abort_here(chain, i, payload, client, reason, downstream=not fresh)
            return
        if self.host.options.order_check:
            floor = self.order_check(token, keys)
            if floor is not None:
                self.host.stats["order_conflicts"] += 1
                if i == 0:
                    self._retry_at_head(chain, payload, client, floor)
                    return
                if rec is not None:
                    self._unindex(rec)
                    del self.records[txn]
                self.retried[txn] = (payload, client, token, floor)
                self._dirty_txns.add(txn)
                self._send_back(chain, i, RetryBackward(self.host.config.version, payload, client, token, floor),
                                None)
                return
        self.retried.pop(txn, None)
        now = self.host.now()
        if rec is None:
            rec = TxnRecord(payload, client, token, Phase.PREPARED, reads, writes, keys)
            self.records[txn] = rec
            self._index(rec)
            refreshed = False
        else:
            refreshed = rec.token != token
            rec.token = token
            rec.superseded = False
            rec.phase = Phase.PREPARED
        self._dirty_txns.add(txn)
        for k in keys:
            ks = self.keys.get(k, EMPTY_KEY)
            if ks.max_seen is None or token > ks.max_seen:
                self._set_key(k, ks._replace(max_seen=token))
        cv = self.host.config.version
        if self.host.on_prepare is not None:
            self.host.on_prepare(self, chain, i, txn, token)
        if i == last:
            rec.phase = Phase.COMMIT_PENDING
            self._send_back(chain, i, CommitBackward(cv, payload, client, token), ClientReply(txn, True))
            self.try_apply()
        else:
            rec.sent_at = now
            self._send(self._hop_endpoint(chain, i + 1), Forward(cv, payload, client, token))
            if refreshed:
                self.try_apply()

    def _retry_at_head(self, chain, payload, client, floor):
        txn = payload.txn_id
        n = self.attempts.get(txn, 0) + 1
        self.attempts[txn] = n
        self.host.stats["retries"] += 1
        self.host.retries_by_txn[txn] += 1
        if n > self.host.options.retry_budget:
            self._abort_here(chain, 0, payload, client, AbortReason.RETRY_BUDGET)
            return
        token = self.host.counter.generate(self.host.server_id, txn, floor)
        self._new_pass(chain, 0, len(chain.hops) - 1, payload, client, token)

    def handle_retry(self, src, msg: RetryBackward):
        payload = msg.payload
        txn = payload.txn_id
        chain, i = self._position(payload)
        if i is None:
            return
        self.host.counter.observe(msg.floor)
        done = self.completed.get(txn)
        if done is not None:
            if not done[0]:
                self._send_back(chain, i, AbortBackward(self.host.config.version, payload, msg.client, done[1]),
                                ClientReply(txn, False, done[1]))
            return
        rec = self.records.get(txn)
        if rec is None or rec.token != msg.token:
            return  # a newer pass already replaced this one
        if i == 0:
            self._retry_at_head(chain, payload, msg.client, msg.floor)
        else:
            rec.superseded = True
            self._dirty_txns.add(txn)
            self._send_back(chain, i, RetryBackward(self.host.config.version, payload, msg.client, msg.token,
                                                    msg.floor), None)

    # -- aborts -----------------------------------------------------------------

    def _abort_here(self, chain, i, payload, client, reason, downstream=True):
        txn = payload.txn_id
        self.host.stats["aborts_" + reason.value] += 1
        self._finish(txn, False, reason, None)
        if downstream:
            self._propagate_abort(chain, i, payload, client, reason)
        else:
            # first sighting here, so no later hop can hold state for it
            self._send_back(chain, i, AbortBackward(self.host.config.version, payload, client, reason),
                            ClientReply(txn, False, reason))
            self._dirty_txns.add(txn)
        self.try_apply()

    def _propagate_abort(self, chain, i, payload, client, reason):
        txn = payload.txn_id
        cv = self.host.config.version
        if i == len(chain.hops) - 1:
            self.aborting.pop(txn, None)
            self._send_back(chain, i, AbortBackward(cv, payload, client, reason), ClientReply(txn, False, reason))
        else:
            self.aborting[txn] = (payload, client, reason, self.host.now())
            self._send(self._hop_endpoint(chain, i + 1), AbortForward(cv, payload, client, reason))
        self._dirty_txns.add(txn)

    def handle_abort_forward(self, src, msg: AbortForward):
        payload = msg.payload
        txn = payload.txn_id
        chain, i = self._position(payload)
        if i is None:
            return
        done = self.completed.get(txn)
        if done is not None and done[0]:
            self.host.violation(f"abort for committed txn {txn:x} at {self.host.server_id}/{self.partition}")
            return
        if done is None:
            self._finish(txn, False, msg.reason, None)
        self._propagate_abort(chain, i, payload, msg.client, msg.reason)
        self.try_apply()

    def handle_abort_backward(self, src, msg: AbortBackward):
        payload = msg.payload
        txn = payload.txn_id
        chain, i = self._position(payload)
        if i is None:
            return
        done = self.completed.get(txn)
        if done is not None and done[0]:
            self.host.violation(f"abort for committed txn {txn:x} at {self.host.server_id}/{self.partition}")
            return
        if done is None:
            self._finish(txn, False, msg.reason, None)
        if self.aborting.pop(txn, None) is not None:
            self._dirty_txns.add(txn)
        self._send_back(chain, i, AbortBackward(self.host.config.version, payload, msg.client, msg.reason),
                        ClientReply(txn, False, msg.reason))
        self.try_apply()

    # -- commit -----------------------------------------------------------------

    def handle_commit(self, src, msg: CommitBackward):
        payload = msg.payload
        txn = payload.txn_id
        chain, i = self._position(payload)
        if i is None:
            return
        done = self.completed.get(txn)
        if done is not None:
            if not done[0]:
                self.host.violation(f"commit for aborted txn {txn:x} at {self.host.server_id}/{self.partition}")
            return
        rec = self.records.get(txn)
        if rec is None:
            return  # unknown here; the retransmit path re-forwards it
        if rec.token != msg.token:
            rec.token = msg.token
            for k in rec.keys:
                ks = self.keys.get(k, EMPTY_KEY)
                if ks.max_seen is None or msg.token > ks.max_seen:
                    self._set_key(k, ks._replace(max_seen=msg.token))
        rec.phase = Phase.COMMIT_PENDING
        self._dirty_txns.add(txn)
        self._send_back(chain, i, CommitBackward(self.host.config.version, payload, msg.client, msg.token),
                        ClientReply(txn, True))
        self.try_apply()

    def try_apply(self):
        """Apply every commit-pending txn that holds the smallest token on all its written keys."""
        progress = True
        while progress:
            progress = False
            for rec in list(self.records.values()):
                if rec.phase is not Phase.COMMIT_PENDING:
                    continue
                if all(self._smallest_writer(w.key) == rec.txn_id for w in rec.writes):
                    self._apply(rec)
                    progress = True

    def _smallest_writer(self, key):
        best = None
        best_tok = None
        for t in self.writers.get(key, ()):
            tok = self.records[t].token
            if best_tok is None or tok < best_tok:
                best, best_tok = t, tok
        return best

    def _apply(self, rec: TxnRecord):
        for w in rec.writes:
            ks = self.keys.get(w.key, EMPTY_KEY)
            try:
                value = apply_atomic(ks.value, w.op)
            except TypeMismatch as e:
                self.host.violation(f"type mismatch at apply time for {rec.txn_id:x}: {e}")
                value = ks.value
            version = ks.version + 1
            self._set_key(w.key, KeyState(value, version, ks.max_seen))
            entry = ApplyRecord(rec.txn_id, w.key, value, version, rec.token)
            self.apply_log.append(entry)
            self.host.persist(("a", self.partition, entry))
        self._finish(rec.txn_id, True, None, rec.token)

    def _reemit_outcome(self, chain, i, payload, client, done):
        committed, reason, token = done
        cv = self.host.config.version
        txn = payload.txn_id
        if committed:
            self._send_back(chain, i, CommitBackward(cv, payload, client, token), ClientReply(txn, True))
        else:
            self._send_back(chain, i, AbortBackward(cv, payload, client, reason), ClientReply(txn, False, reason))

    # -- status -----------------------------------------------------------------

    def status(self, txn) -> str:
        done = self.completed.get(txn)
        if done is not None:
            return "committed" if done[0] else "aborted"
        if txn in self.records or txn in self.retried:
            return "pending"
        return "unknown"

    # -- retransmission -------------------------------------------------------

    def retransmit(self, now, force=False, old_config=None):
        """Re-send the last outbound message of every unresolved txn that timed out or whose chain changed."""
        cfg = self.host.config
        cv = cfg.version
        rto = self.host.options.rto_us

        def changed(payload):
            if old_config is None:
                return False
            return old_config.chain_for(payload).hops != cfg.chain_for(payload).hops

        for rec in list(self.records.values()):
            if rec.superseded or rec.phase is not Phase.PREPARED:
                continue
            if not (force or now - rec.sent_at >= rto or changed(rec.payload)):
                continue
            chain, i = self._position(rec.payload)
            if i is None:
                continue
            if i == len(chain.hops) - 1:
                self._decide_at_tail(chain, i, rec)
                continue
            rec.sent_at = now
            self.host.stats["retransmits"] += 1
            self._send(self._hop_endpoint(chain, i + 1), Forward(cv, rec.payload, rec.client, rec.token))
        for txn, (payload, client, token, floor) in list(self.retried.items()):
            if not (force or changed(payload)):
                continue
            chain, i = self._position(payload)
            if i is None or i == 0:
                continue
            self._send(self._hop_endpoint(chain, i - 1), RetryBackward(cv, payload, client, token, floor))
        for txn, (payload, client, reason, sent_at) in list(self.aborting.items()):
            if not (force or now - sent_at >= rto or changed(payload)):
                continue
            chain, i = self._position(payload)
            if i is None:
                continue
            self.host.stats["retransmits"] += 1
            self._propagate_abort(chain, i, payload, client, reason)

    # -- durability and recovery ------------------------------------------------

    def flush(self):
        if self._dirty_keys:
            for k in self._dirty_keys:
                self.host.persist(("k", self.partition, k, self.keys[k]))
            self._dirty_keys.clear()
        if self._dirty_txns:
            for t in self._dirty_txns:
                rec = self.records.get(t)
                self.host.persist(("r", self.partition, t, rec.snapshot() if rec else None,
                                   self.completed.get(t), self.retried.get(t), self.aborting.get(t)))
            self._dirty_txns.clear()

    def snapshot(self):
        return {
            "keys": [(k, ks) for k, ks in self.keys.items()],
            "records": [rec.snapshot() for rec in self.records.values()],
            "completed": [(t, c) for t, c in self.completed.items()],
            "retried": [(t, r) for t, r in self.retried.items()],
            "aborting": [(t, a) for t, a in self.aborting.items()],
        }

    def install(self, snap, config):
        self.host.persist(("reset", self.partition))
        self.keys = dict(snap["keys"])
        self.records = {}
        self.writers, self.readers = {}, {}
        for payload, client, token, phase, superseded in snap["records"]:
            reads, writes, keys = local_parts(payload, config, self.partition)
            rec = TxnRecord(payload, client, token, Phase(phase), reads, writes, keys, superseded)
            self.records[payload.txn_id] = rec
            self.highest[payload.txn_id] = token
            self._index(rec)
        self.completed = dict(snap["completed"])
        self.retried = dict(snap["retried"])
        for t, (_, _, token, _) in self.retried.items():
            self.highest[t] = token
        self.aborting = dict(snap["aborting"])
        self._dirty_keys.update(self.keys)
        self._dirty_txns.update(self.records)
        self._dirty_txns.update(self.completed)
        self._dirty_txns.update(self.retried)
        self._dirty_txns.update(self.aborting)

    def fingerprint(self):
        keys = tuple(sorted((k, ks.version, ks.max_seen) for k, ks in self.keys.items()))
        recs = tuple(sorted((t, r.token, r.phase.value, r.superseded) for t, r in self.records.items()))
        comp = tuple(sorted((t, c[0]) for t, c in self.completed.items()))
        retr = tuple(sorted((t, r[2], r[3]) for t, r in self.retried.items()))
        abt = tuple(sorted(self.aborting))
        applied = tuple((a.txn_id, a.key) for a in self.apply_log)
        return (self.partition, keys, recs, comp, retr, abt, applied)


class StorageServer:
    """One physical server; owns a virtual server per replicated partition."""

    def __init__(self, server_id: int, net, config: Configuration, options: ServerOptions | None = None,
                 disk: list | None = None, extensions: dict | None = None, restarting: bool = False):
        self.server_id = server_id
        self.net = net
        self.options = options or ServerOptions()
        self.counter = TokenCounter()
        self.config = config
        self.vss: dict[int, VirtualServer] = {}
        self.retired: dict[int, VirtualServer] = {}
        self.deferred: list = []
        self.disk = disk if disk is not None else []
        self.stats = _Stats()
        self.retries_by_txn = _Stats()
        self.violations: list[str] = []
        self.extensions = extensions or {}
        self.on_prepare = None
        self._sweep_armed = False
        self._asked_config = 0
        if restarting:
            self.restore()
            self._install_config(config, None)
        else:
            for p, slot in config.owned_by(server_id).items():
                vs = VirtualServer(self, p, slot)
                vs.valid_version = config.version
                self.vss[p] = vs
                self.persist(("valid", p, config.version))

    @property
    def address(self):
        return self.config.address(self.server_id)

    def now(self):
        return self.net.now()

    def send(self, dst, msg):
        self.net.send(dst, msg)

    def persist(self, entry):
        self.disk.append(entry)

    def violation(self, text):
        log.error("invariant violation: %s", text)
        self.violations.append(text)

    # -- dispatch ---------------------------------------------------------------

    def deliver(self, src: str, dst: str, msg):
        """Entry point for the transport; dst is "address" or "address/partition"."""
        slash = dst.rfind("/")
        part = int(dst[slash + 1:]) if slash >= 0 else None
        t = type(msg)
        if part is None:
            self._handle_server_level(src, msg)
        else:
            cv = getattr(msg, "config_version", None)
            if cv is not None and cv > self.config.version:
                self.deferred.append((src, dst, msg))
                self._request_config(cv)
                return
            vs = self.vss.get(part)
            if vs is None:
                if t is RecoverRequest:
                    self._handle_recover_request(src, msg)
                elif t in (Read, Forward, StatusQuery) or t in self.extensions:
                    self.send(src, WrongServer(self.config.version, msg))
                return
            if not vs.ready:
                if t is RecoverReply:
                    self._handle_recover_reply(vs, msg)
                else:
                    vs.buffer.append((src, dst, msg))
                return
            self._dispatch(vs, src, msg)
            vs.flush()
        self._arm_sweep()

    def _dispatch(self, vs, src, msg):
        t = type(msg)
        if t is Forward:
            vs.handle_forward(src, msg)
        elif t is CommitBackward:
            vs.handle_commit(src, msg)
        elif t is RetryBackward:
            vs.handle_retry(src, msg)
        elif t is AbortForward:
            vs.handle_abort_forward(src, msg)
        elif t is AbortBackward:
            vs.handle_abort_backward(src, msg)
        elif t is Read:
            try:
                value, version = vs.local_read(msg.key)
            except WrongServerError:
                self.send(src, WrongServer(self.config.version, msg))
                return
            self.send(src, ReadReply(msg.req_id, msg.key, value, version))
        elif t is StatusQuery:
            self.send(src, StatusReply(msg.req_id, msg.txn_id, vs.status(msg.txn_id)))
        elif t is RecoverRequest:
            self._handle_recover_request(src, msg)
        elif t is RecoverReply:
            self._handle_recover_reply(vs, msg)
        elif t in self.extensions:
            self.extensions[t](vs, src, msg)
        else:
            log.warning("server %s dropping unexpected %s", self.server_id, t.__name__)

    def _handle_server_level(self, src, msg):
        t = type(msg)
        if t is ConfigResponse:
            self.on_config(msg.config)
        elif t is WrongServer:
            if msg.config_version > self.config.version:
                self._request_config(msg.config_version)
        elif t is RecoverRequest:
            self._handle_recover_request(src, msg)
        elif t is RecoverReply:
            vs = self.vss.get(msg.partition)
            if vs is not None and not vs.ready:
                self._handle_recover_reply(vs, msg)
        elif t is StatusQuery:
            self.deliver(src, f"{self.address}/{self.config.partition_of(msg.key)}", msg)
        else:
            log.warning("server %s dropping unexpected %s", self.server_id, t.__name__)

    def _request_config(self, version):
        if version > self._asked_config:
            self._asked_config = version
            self.send(self.options.coordinator, GetConfig(version))

    # -- timers -------------------------------------------------------------------

    def _arm_sweep(self):
        if self._sweep_armed:
            return
        if any(vs.pending_work() or not vs.ready for vs in self.vss.values()):
            self._sweep_armed = True
            self.net.schedule(self.options.sweep_us, self.sweep)

    def sweep(self):
        self._sweep_armed = False
        now = self.now()
        for vs in self.vss.values():
            if vs.ready:
                vs.retransmit(now)
                vs.flush()
            elif now - vs.recover_asked_at >= self.options.recover_retry_us:
                self._start_recovery(vs)
        self._arm_sweep()

    # -- configuration changes ----------------------------------------------------

    def on_config(self, config: Configuration):
        if config.version <= self.config.version:
            return
        self._install_config(config, self.config)

    def _install_config(self, config: Configuration, old: Configuration | None):
        self.config = config
        owned = config.owned_by(self.server_id)
        for p in list(self.vss):
            if p not in owned:
                self.retired[p] = self.vss.pop(p)
        for p, slot in owned.items():
            vs = self.vss.get(p)
            if vs is None:
                vs = self.retired.pop(p, None)
                if vs is not None and vs.ready and config.partitions[p].since[slot] <= vs.valid_version:
                    pass  # our durable copy is still authoritative
                else:
                    vs = VirtualServer(self, p, slot)
                    vs.ready = False
                self.vss[p] = vs
            vs.slot = slot
            if vs.ready:
                if self.server_id not in config.partitions[p].pending:
                    vs.valid_version = config.version
                    self.persist(("valid", p, config.version))
            elif vs.recover_from is None or not config.is_live(vs.recover_from):
                self._start_recovery(vs)
        now = self.now()
        for vs in list(self.vss.values()):
            if vs.ready:
                vs.retransmit(now, force=old is None, old_config=old)
                vs.flush()
        waiting, self.deferred = self.deferred, []
        for src, dst, msg in waiting:
            self.deliver(src, dst, msg)
        self._arm_sweep()

    def _start_recovery(self, vs: VirtualServer):
        vs.recover_asked_at = self.now()
        source = recovery_source(self.config, vs.partition, self.server_id)
        vs.recover_from = source
        if source is None:
            if self.server_id in self.config.partitions[vs.partition].pending:
                self._arm_sweep()
                return
            # nobody else holds the partition and we are not a recruit: nothing to copy
            self._finish_recovery(vs, None)
            return
        self.send(self.config.endpoint(source, vs.partition),
                  RecoverRequest(vs.partition, self.config.version, self.address))
        self._arm_sweep()

    def _handle_recover_request(self, src, msg: RecoverRequest):
        vs = self.vss.get(msg.partition) or self.retired.get(msg.partition)
        if vs is None or not vs.ready:
            if vs is not None:
                vs.buffer.append((src, f"{self.address}/{msg.partition}", msg))
            return
        self.send(f"{msg.requester}/{msg.partition}",
                  RecoverReply(msg.partition, self.config.version, vs.snapshot()))

    def _handle_recover_reply(self, vs: VirtualServer, msg: RecoverReply):
        if vs.ready:
            return
        self._finish_recovery(vs, msg.snapshot)

    def _finish_recovery(self, vs: VirtualServer, snap):
        if snap is not None:
            vs.install(snap, self.config)
        vs.ready = True
        vs.valid_version = self.config.version
        self.persist(("valid", vs.partition, vs.valid_version))
        vs.flush()
        if self.server_id in self.config.partitions[vs.partition].pending:
            self.send(self.options.coordinator, RecoveryDone(self.server_id, vs.partition))
        waiting, vs.buffer = vs.buffer, []
        for src, dst, msg in waiting:
            self.deliver(src, dst, msg)
        vs.retransmit(self.now(), force=True)
        vs.flush()

    # -- restart --------------------------------------------------------------------

    def restore(self):
        """Rebuild virtual servers from the durable log after a crash."""
        vss: dict[int, VirtualServer] = {}
        raw: dict = {}

        def get(p):
            if p not in vss:
                vss[p] = VirtualServer(self, p)
                vss[p].ready = False
            return vss[p]

        for entry in self.disk:
            kind = entry[0]
            if kind == "k":
                get(entry[1]).keys[entry[2]] = entry[3]
            elif kind == "r":
                get(entry[1])
                raw[(entry[1], entry[2])] = entry[3:]
            elif kind == "a":
                get(entry[1]).apply_log.append(entry[2])
            elif kind == "valid":
                vs = get(entry[1])
                vs.valid_version = entry[2]
                vs.ready = True
            elif kind == "reset":
                vss.pop(entry[1], None)
                for key in [k for k in raw if k[0] == entry[1]]:
                    del raw[key]
        for (p, t), (rec, done, retried, aborting) in raw.items():
            vs = vss[p]
            if done is not None:
                vs.completed[t] = done
            if retried is not None:
                vs.retried[t] = retried
                vs.highest[t] = retried[2]
            if aborting is not None:
                vs.aborting[t] = aborting
            if rec is not None and done is None:
                payload, client, token, phase, superseded = rec
                reads, writes, keys = local_parts(payload, self.config, p)
                r = TxnRecord(payload, client, token, Phase(phase), reads, writes, keys, superseded)
                vs.records[t] = r
                vs.highest[t] = token
                vs._index(r)
        for vs in vss.values():
            for r in vs.records.values():
                self.counter.observe(r.token)
            for ks in vs.keys.values():
                self.counter.observe(ks.max_seen)
        self.retired = vss
        self.vss = {}

    def fingerprint(self):
        return (self.counter.next,) + tuple(vs.fingerprint() for _, vs in sorted(self.vss.items()))


class _Stats(dict):
    def __missing__(self, key):
        return 0
