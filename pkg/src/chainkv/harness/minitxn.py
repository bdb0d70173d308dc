"""Mini-transaction baseline: two-phase commit with non-blocking locks.

Phase one sends a prepare to the first replica of every touched partition in
parallel. That replica takes shared locks on read keys and exclusive locks on
written keys, checks read versions, and either votes no straight away or
copies the prepare down the partition's replicas, the last of which votes
yes. Phase two carries the decision the same way and releases the locks.
A busy lock never waits: the vote is no.
"""

from __future__ import annotations

from ..client import Client, Outcome
from ..core import apply_atomic, TypeMismatch
from ..messages import AbortReason, MtAck, MtDecision, MtPrepare, MtVote
from ..server import EMPTY_KEY, ApplyRecord, KeyState, local_parts

SHARED, EXCLUSIVE = "S", "X"


def _locks(vs):
    st = vs.extension_state
    if "locks" not in st:
        st["locks"] = {}      # key -> (mode, set of txns)
        st["held"] = {}       # txn -> keys
    return st["locks"], st["held"]


def _try_lock(vs, txn, reads, writes):
    locks, held = _locks(vs)
    want = {r.key: SHARED for r in reads}
    for w in writes:
        want[w.key] = EXCLUSIVE
    for k, mode in want.items():
        cur = locks.get(k)
        if cur is None:
            continue
        cmode, owners = cur
        if owners - {txn} and (mode == EXCLUSIVE or cmode == EXCLUSIVE):
            return False
    for k, mode in want.items():
        cur = locks.get(k)
        if cur is None:
            locks[k] = (mode, {txn})
        else:
            owners = cur[1] | {txn}
            locks[k] = (EXCLUSIVE if EXCLUSIVE in (mode, cur[0]) else SHARED, owners)
    held[txn] = tuple(want)
    return True


def _unlock(vs, txn):
    locks, held = _locks(vs)
    for k in held.pop(txn, ()):
        mode, owners = locks[k]
        owners = owners - {txn}
        if owners:
            locks[k] = (mode, owners)
        else:
            del locks[k]


def _next_endpoint(vs, p):
    cfg = vs.host.config
    reps = cfg.partitions[p].replicas
    if vs.slot + 1 < len(reps):
        return cfg.endpoint(reps[vs.slot + 1], p)
    return None


def handle_prepare(vs, src, msg: MtPrepare):
    payload = msg.payload
    txn = payload.txn_id
    reads, writes, _ = local_parts(payload, vs.host.config, msg.partition)
    if vs.slot == 0:
        reason = None
        for r in reads:
            if vs.keys.get(r.key, EMPTY_KEY).version != r.version:
                reason = AbortReason.STALE_READ
                break
        if reason is None and not _try_lock(vs, txn, reads, writes):
            reason = AbortReason.LOCK_BUSY
        if reason is not None:
            vs.host.stats["aborts_" + reason.value] += 1
            vs.host.send(msg.client, MtVote(txn, msg.partition, False, reason))
            return
    nxt = _next_endpoint(vs, msg.partition)
    if nxt is None:
        vs.host.send(msg.client, MtVote(txn, msg.partition, True))
    else:
        vs.host.send(nxt, msg)


def handle_decision(vs, src, msg: MtDecision):
    payload = msg.payload
    txn = payload.txn_id
    if vs.slot == 0:
        _, held = _locks(vs)
        if txn not in held:
            # aborted before this partition locked anything; nothing to undo or copy
            if msg.commit:
                vs.host.violation(f"commit decision for unlocked txn {txn:x}")
            return
        _unlock(vs, txn)
    if msg.commit:
        _, writes, _ = local_parts(payload, vs.host.config, msg.partition)
        for w in writes:
            ks = vs.keys.get(w.key, EMPTY_KEY)
            try:
                value = apply_atomic(ks.value, w.op)
            except TypeMismatch as e:
                vs.host.violation(f"type mismatch applying {txn:x}: {e}")
                value = ks.value
            vs._set_key(w.key, KeyState(value, ks.version + 1, ks.max_seen))
            entry = ApplyRecord(txn, w.key, value, ks.version + 1, None)
            vs.apply_log.append(entry)
            vs.host.persist(("a", vs.partition, entry))
    nxt = _next_endpoint(vs, msg.partition)
    if nxt is None:
        vs.host.send(msg.client, MtAck(txn, msg.partition))
    else:
        vs.host.send(nxt, msg)


def server_extensions():
    return {MtPrepare: handle_prepare, MtDecision: handle_decision}


class MiniTxnClient(Client):
    """Client that commits through the two-phase baseline instead of a chain."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.mt: dict = {}   # txn -> [future, payload, partitions, yes votes, decided]

    def _participants(self, payload):
        cfg = self.config
        return sorted({cfg.partition_of(r.key) for r in payload.reads}
                      | {cfg.partition_of(w.key) for w in payload.writes})

    def submit(self, payload):
        fut = self.net.create_future()
        parts = self._participants(payload)
        self.mt[payload.txn_id] = [fut, payload, parts, set(), False]
        cfg = self.config
        for p in parts:
            self.net.send(cfg.endpoint(cfg.partitions[p].replicas[0], p),
                          MtPrepare(cfg.version, payload, self.address, p))
        return fut

    def _decide(self, entry, commit, reason=None):
        fut, payload, parts, _, decided = entry
        if decided:
            return
        entry[4] = True
        cfg = self.config
        for p in parts:
            self.net.send(cfg.endpoint(cfg.partitions[p].replicas[0], p),
                          MtDecision(cfg.version, payload, self.address, p, commit))
        del self.mt[payload.txn_id]
        outcome = Outcome(commit, reason)
        if self.on_reply is not None:
            self.on_reply(payload, outcome)
        fut.set_result(outcome)

    def deliver(self, src, dst, msg):
        t = type(msg)
        if t is MtVote:
            entry = self.mt.get(msg.txn_id)
            if entry is None:
                return
            if not msg.ok:
                self._decide(entry, False, msg.reason)
                return
            entry[3].add(msg.partition)
            if len(entry[3]) == len(entry[2]):
                self._decide(entry, True)
        elif t is MtAck:
            pass
        else:
            super().deliver(src, dst, msg)
