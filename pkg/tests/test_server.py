import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainkv.core import ABSENT, Add, ListAppend, MediatorToken, Overwrite, ReadRecord, TransactionPayload, WriteRecord
from chainkv.harness.search import Scenario, World, _layout
from chainkv.messages import AbortBackward, AbortReason, CommitBackward, Forward, RetryBackward
from chainkv.server import RETRY_BUDGET, FileLog, KeyState, ServerOptions, StorageServer, WrongServerError

from conftest import K, run

A, Z = K("A"), K("Z")


def world(txns, options=None):
    """Two single-replica partitions: A..L on server 0, M.. on server 1."""
    cfg = _layout(["A", "M"], 0)
    return World(Scenario("t", cfg, list(txns), options or ServerOptions()))


def vs_of(w, sid):
    (vs,) = w.servers[sid].vss.values()
    return vs


def head_msg(w, link):
    return w.net.links[link][0][1]


def step(w, kind, txn=None):
    """Deliver the first enabled message of type `kind` (optionally for `txn`); return it."""
    for link in w.net.enabled():
        msg = head_msg(w, link)
        if type(msg) is kind and (txn is None or msg.payload.txn_id == txn):
            w.step(link)
            return link, msg
    raise AssertionError(f"no {kind.__name__} in flight")


def drain(w):
    while w.net.enabled():
        w.step(w.net.enabled()[0])


def outcome(w, txn):
    return w.clients[txn].outcomes.get(txn)


def txn(tid, reads=(), writes=()):
    return TransactionPayload(tid, tuple(ReadRecord(k, v) for k, v in reads),
                              tuple(WriteRecord(k, op) for k, op in writes))


# --- local reads ---------------------------------------------------------------------


def test_prepared_writes_are_not_visible():
    w = world([txn(1, writes=[(A, Overwrite(5)), (Z, Overwrite(6))])])
    step(w, Forward, 1)
    vs = vs_of(w, 0)
    assert 1 in vs.records
    assert vs.local_read(A) == (ABSENT, 0)
    drain(w)
    assert vs.local_read(A) == (5, 1)
    assert outcome(w, 1) is True


def test_local_read_wrong_partition():
    w = world([])
    with pytest.raises(WrongServerError):
        vs_of(w, 0).local_read(Z)


# --- validation ------------------------------------------------------------------------


def test_stale_read_is_rejected():
    w = world([])
    vs = vs_of(w, 0)
    vs.keys[A] = KeyState(b"v", 4, None)
    assert vs.validate(9, (ReadRecord(A, 3),), ()) is AbortReason.STALE_READ
    assert vs.validate(9, (ReadRecord(A, 4),), ()) is None


def test_write_write_overlap_is_valid_but_read_conflicts():
    w = world([txn(1, reads=[(Z, 0)], writes=[(A, Overwrite(1))])])
    step(w, Forward, 1)            # prepared at server 0, forwarded on
    vs = vs_of(w, 0)
    assert vs.validate(2, (), (WriteRecord(A, Overwrite(2)),)) is None
    assert vs.validate(2, (ReadRecord(A, 0),), ()) is AbortReason.CONFLICT


def test_write_against_prepared_reader_conflicts():
    w = world([txn(1, reads=[(A, 0)], writes=[(Z, Overwrite(1))])])
    step(w, Forward, 1)
    assert vs_of(w, 0).validate(2, (), (WriteRecord(A, Overwrite(2)),)) is AbortReason.CONFLICT


def test_type_check_sees_prepared_writers():
    w = world([txn(1, writes=[(A, Overwrite(b"text")), (Z, Overwrite(1))])])
    step(w, Forward, 1)
    vs = vs_of(w, 0)
    # Add could follow the prepared string overwrite, so it is refused up front
    assert vs.validate(2, (), (WriteRecord(A, Add(1)),)) is AbortReason.TYPE_MISMATCH


def test_stale_read_downstream_aborts_whole_chain():
    w = world([txn(1, reads=[(Z, 3)], writes=[(A, Overwrite(1))])])
    drain(w)
    assert outcome(w, 1) is False
    assert vs_of(w, 1).completed[1][1] is AbortReason.STALE_READ
    assert vs_of(w, 0).status(1) == "aborted"
    assert vs_of(w, 0).local_read(A) == (ABSENT, 0)


# --- token ordering -----------------------------------------------------------------------


def test_order_check_reports_largest_offender():
    w = world([])
    vs = vs_of(w, 0)
    big = MediatorToken(12, 1, 5)
    vs.keys[A] = KeyState(ABSENT, 0, big)
    assert vs.order_check(MediatorToken(10, 0, 1), [A]) == big
    assert vs.order_check(MediatorToken(13, 0, 0), [A]) is None


def test_retry_backward_carries_floor_and_new_token_clears_it():
    floor = MediatorToken(12, 9, 99)
    w = world([txn(1, writes=[(A, Overwrite(1)), (Z, Overwrite(2))])])
    vs_of(w, 1).keys[Z] = KeyState(ABSENT, 0, floor)
    step(w, Forward, 1)
    _, fwd = step(w, Forward, 1)
    assert fwd.token.counter < 12
    _, retry = step(w, RetryBackward, 1)
    assert retry.floor == floor
    drain(w)
    assert outcome(w, 1) is True
    applied = vs_of(w, 1).apply_log[-1]
    assert applied.token > floor and applied.token.counter >= 13
    assert w.servers[0].stats["retries"] == 1


def test_retry_budget_exhausted():
    floor = MediatorToken(12, 9, 99)
    w = world([txn(1, writes=[(A, Overwrite(1)), (Z, Overwrite(2))])])
    vs_of(w, 1).keys[Z] = KeyState(ABSENT, 0, floor)
    vs_of(w, 0).attempts[1] = RETRY_BUDGET
    drain(w)
    assert outcome(w, 1) is False
    assert vs_of(w, 0).completed[1][1] is AbortReason.RETRY_BUDGET


def test_order_check_off_lets_small_token_through():
    w = world([txn(1, writes=[(A, Overwrite(1)), (Z, Overwrite(2))])], ServerOptions(order_check=False))
    vs_of(w, 1).keys[Z] = KeyState(ABSENT, 0, MediatorToken(12, 9, 99))
    drain(w)
    assert outcome(w, 1) is True
    assert w.servers[0].stats["retries"] == 0


# --- deferred application -----------------------------------------------------------------


def test_larger_token_waits_for_smaller_writer():
    t1 = txn(1, writes=[(A, Overwrite(1)), (Z, Overwrite(1))])
    t2 = txn(2, writes=[(A, Overwrite(2))])       # single hop on server 0
    w = world([t1, t2])
    step(w, Forward, 1)
    step(w, Forward, 2)
    vs = vs_of(w, 0)
    assert vs.records[2].token > vs.records[1].token
    # t2 is commit-pending but must wait behind the prepared t1
    assert vs.status(2) == "pending" and vs.local_read(A) == (ABSENT, 0)
    drain(w)
    assert outcome(w, 1) is True and outcome(w, 2) is True
    assert [a.txn_id for a in vs.apply_log] == [1, 2]
    assert vs.local_read(A) == (2, 2)


def test_abort_of_smaller_writer_releases_larger():
    t1 = txn(1, reads=[(Z, 7)], writes=[(A, Overwrite(1))])   # stale at server 1
    t2 = txn(2, writes=[(A, Overwrite(2))])
    w = world([t1, t2])
    step(w, Forward, 1)
    step(w, Forward, 2)
    drain(w)
    vs = vs_of(w, 0)
    assert [a.txn_id for a in vs.apply_log] == [2]
    assert outcome(w, 1) is False and outcome(w, 2) is True


# --- duplicates ---------------------------------------------------------------------------


def test_replayed_commit_applies_once():
    w = world([txn(1, writes=[(A, Add(3)), (Z, Add(3))])])
    step(w, Forward, 1)
    step(w, Forward, 1)
    link, commit = step(w, CommitBackward, 1)
    srv = w.servers[0]
    srv.deliver(link[0], f"{srv.address}/0", commit)
    drain(w)
    vs = vs_of(w, 0)
    assert len(vs.apply_log) == 1 and vs.local_read(A) == (3, 1)
    assert not srv.violations


def test_replayed_forward_reemits_outcome():
    p = txn(1, writes=[(A, Add(3)), (Z, Add(3))])
    w = world([p])
    drain(w)
    srv = w.servers[1]
    srv.deliver(w.servers[0].address, f"{srv.address}/1", Forward(1, p, "c0", vs_of(w, 1).apply_log[0].token))
    drain(w)
    assert len(vs_of(w, 1).apply_log) == 1
    assert outcome(w, 1) is True


def test_abort_is_idempotent():
    w = world([txn(1, reads=[(Z, 3)], writes=[(A, Overwrite(1))])])
    step(w, Forward, 1)
    step(w, Forward, 1)
    link, ab = step(w, AbortBackward, 1)
    w.servers[0].deliver(link[0], f"{w.servers[0].address}/0", ab)
    drain(w)
    vs = vs_of(w, 0)
    assert vs.status(1) == "aborted" and not vs.records and not vs.apply_log
    assert not w.servers[0].violations
    assert outcome(w, 1) is False


# --- serializability of random two-transaction schedules ------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 10 ** 6), min_size=1, max_size=60))
def test_random_schedules_keep_apply_order(choices):
    t1 = txn(1, writes=[(A, ListAppend(1)), (Z, ListAppend(1))])
    t2 = txn(2, writes=[(A, ListAppend(2)), (Z, ListAppend(2))])
    w = world([t1, t2])
    it = iter(choices)
    while w.net.enabled():
        en = w.net.enabled()
        w.step(en[next(it, 0) % len(en)])
    orders = [[a.txn_id for a in vs_of(w, s).apply_log] for s in (0, 1)]
    assert orders[0] == orders[1]
    for s in (0, 1):
        toks = [a.token for a in vs_of(w, s).apply_log]
        assert toks == sorted(toks)
    assert sorted(orders[0]) == [t for t in (1, 2) if outcome(w, t) is True]


# --- recovery and durability ------------------------------------------------------------------


def test_replacement_replica_copies_state(cluster):
    c = cluster.add_client()

    async def load():
        ctx = c.begin()
        for i in range(12):
            ctx.put(K(f"k{i}"), Overwrite(i))
        return await ctx.commit()
    assert run(cluster, load()).committed
    cluster.crash(1)
    cluster.run(until=cluster.sim.now + 2_000_000)
    cfg = cluster.config
    assert not cfg.is_live(1) and all(not p.pending for p in cfg.partitions)
    assert cluster.check_invariants() == []

    async def readback():
        return [await c.get(K(f"k{i}")) for i in range(12)]
    assert run(cluster, readback()) == list(range(12))
    # the recruit holds the same data as its partner
    for p, part in enumerate(cfg.partitions):
        a, b = (cluster.servers[s].vss[p] for s in part.replicas)
        assert {k: ks.value for k, ks in a.keys.items()} == {k: ks.value for k, ks in b.keys.items()}


def test_recruited_tail_commits_copied_prepare(cluster):
    # the tail dies while the head prepares; its replacement copies the
    # prepared record and must still decide it when the head re-forwards
    c = cluster.add_client()
    key = K("tail")
    part = cluster.config.partitions[cluster.config.partition_of(key)]
    head, tail = part.replicas[0], part.replicas[-1]
    cluster.servers[head].on_prepare = (
        lambda *a: cluster.sim.call_at(cluster.sim.now, lambda: cluster.crash(tail)))
    task = cluster.spawn(c.put(key, Overwrite(1)))
    cluster.run(until=cluster.sim.now + 60_000_000)
    assert task.done and task.result().committed
    assert cluster.check_invariants() == []


def test_restart_from_durable_log(cluster):
    c = cluster.add_client()

    async def load():
        return await c.put(K("dur"), Overwrite(42))
    assert run(cluster, load()).committed
    p = cluster.config.partition_of(K("dur"))
    sid = cluster.config.partitions[p].replicas[-1]
    old = cluster.servers[sid]
    again = StorageServer(sid, old.net, cluster.config, old.options, list(cluster.disks[sid]), restarting=True)
    assert again.vss[p].local_read(K("dur")) == (42, 1)
    assert again.counter.next >= old.vss[p].keys[K("dur")].max_seen.counter


def test_file_log_survives_torn_tail(tmp_path):
    path = os.path.join(tmp_path, "srv.log")
    log = FileLog(path)
    entries = [("valid", 0, 1), ("k", 0, A, KeyState(7, 1, MediatorToken(3, 0, 9))), ("reset", 0)]
    for e in entries:
        log.append(e)
    log.close()
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x01\x00partial")
    again = FileLog(path)
    assert list(again) == entries
    again.append(("valid", 1, 2))
    again.close()
    assert list(FileLog(path)) == entries + [("valid", 1, 2)]
