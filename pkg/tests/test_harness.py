import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainkv.harness.history import (Cycle, History, MalformedHistory, TxnEntry, check_serializable,
                                     dangling_reads)
from chainkv.harness.metrics import Metrics, latency_cdf
from chainkv.harness.search import (cycle_scenario, interleaving_search, overlap_scenario,
                                    read_write_cycle_scenario, replay)
from chainkv.harness.workload import (ClusterParams, micro, micro_key, mixed, run_workload, tpcc_lite,
                                      txn_rng)
from chainkv.mapping import initial_configuration

from conftest import K

# --- history oracle ---------------------------------------------------------------------

names = st.sampled_from(["a", "b", "c", "d"])


@st.composite
def serial_histories(draw):
    """Execute random transactions one after another, so the result is serializable by construction."""
    version = Counter()
    h = History()
    order = draw(st.permutations(range(draw(st.integers(0, 8)))))
    for t in order:
        reads = draw(st.lists(names, max_size=3, unique=True))
        writes = draw(st.lists(names, max_size=3, unique=True))
        committed = draw(st.booleans())
        entry_reads = tuple((K(k), version[k]) for k in reads)
        entry_writes = []
        for k in writes:
            if committed:
                version[k] += 1
            entry_writes.append((K(k), version[k] if committed else 0))
        h.add(TxnEntry(t + 1, entry_reads, tuple(entry_writes), committed))
    return h


@settings(max_examples=150)
@given(serial_histories())
def test_serial_histories_pass(h):
    assert check_serializable(h)
    assert dangling_reads(h) == []


@given(serial_histories())
def test_history_json_round_trip(h):
    assert History.from_json(h.to_json()) == h


def test_lost_update_is_a_cycle():
    h = History()
    h.add(TxnEntry(1, ((K("k"), 0),), ((K("k"), 1),), True))
    h.add(TxnEntry(2, ((K("k"), 0),), ((K("k"), 2),), True))
    res = check_serializable(h)
    assert isinstance(res, Cycle) and set(res.txns) == {1, 2}


def test_aborted_transactions_are_ignored():
    h = History()
    h.add(TxnEntry(1, ((K("k"), 0),), ((K("k"), 1),), True))
    h.add(TxnEntry(2, ((K("k"), 0),), ((K("k"), 2),), False))
    assert check_serializable(h)


def test_write_skew_is_a_cycle():
    h = History()
    h.add(TxnEntry(1, ((K("x"), 0), (K("y"), 0)), ((K("x"), 1),), True))
    h.add(TxnEntry(2, ((K("x"), 0), (K("y"), 0)), ((K("y"), 1),), True))
    assert not check_serializable(h)


def test_fixture_history_has_cycle():
    with open("tests/fixtures/cyclic_history.json") as fh:
        assert not check_serializable(History.from_json(fh.read()))


def test_malformed_histories():
    with pytest.raises(MalformedHistory):
        History.from_json('{"nope": []}')
    h = History()
    h.add(TxnEntry(1, (), ((K("k"), 1),), True))
    h.add(TxnEntry(2, (), ((K("k"), 1),), True))
    with pytest.raises(MalformedHistory):
        check_serializable(h)


# --- interleaving search --------------------------------------------------------------------


def test_cycle_scenario_is_safe_under_every_schedule():
    res = interleaving_search(cycle_scenario(f=0))
    assert res and res.exhaustive and res.schedules > 1


def test_cycle_scenario_without_order_check_breaks():
    sc = cycle_scenario(f=0, order_check=False)
    res = interleaving_search(sc, keep_going=True)
    assert not res and res.cycle
    world, reason = replay(sc, res.trace)
    assert reason == res.reason


@pytest.mark.parametrize("make", [overlap_scenario, read_write_cycle_scenario])
def test_other_scenarios_are_safe(make):
    assert interleaving_search(make(f=0))


def test_search_bound_stops_early():
    res = interleaving_search(cycle_scenario(f=0), bound=2)
    assert res and res.schedules == 2 and not res.exhaustive


# --- workloads ----------------------------------------------------------------------------------


def test_tpcc_mix_proportions():
    spec = tpcc_lite(seed=3)
    n = 1_000_000
    got = Counter(spec.draw(txn_rng(spec, i)).name for i in range(n))
    want = {"new_order": 0.45, "payment": 0.45, "order_status": 0.05, "stock_level": 0.05}
    for name, w in want.items():
        assert abs(got[name] / n - w) <= 0.005, (name, got[name] / n)


def test_tpcc_hot_set():
    spec = tpcc_lite()
    assert len(spec.hot_keys) == len(set(spec.hot_keys)) == 110
    assert {k.schema for k in spec.hot_keys} == {"x_district", "y_warehouse"}
    assert spec.schemas[-2:] == ("x_district", "y_warehouse")


def test_micro_keys_hit_distinct_partitions():
    cfg = initial_configuration(range(6), 1, 64)
    for p in (0, 1, 17, 63):
        k = micro_key(p, 1234)
        assert len(k.key) == 12 and cfg.partition_of(k) == p
    with pytest.raises(ValueError):
        micro(txn_size=65)


def test_zero_duration_gives_empty_history():
    h, m, _ = run_workload(mixed(seed=1, duration=0), ClusterParams(seed=1))
    assert len(h) == 0 and m.committed == m.attempts == 0


def test_small_mixed_run_is_serializable():
    h, m, cluster = run_workload(mixed(seed=4, duration=150), ClusterParams(seed=4))
    assert m.issued == 150 and m.committed + m.aborted == 150
    assert check_serializable(h)
    assert cluster.check_invariants() == []


def test_minitxn_baseline_is_serializable():
    h, m, cluster = run_workload(mixed(seed=5, duration=120), ClusterParams(seed=5, protocol="minitxn"))
    assert m.issued == 120
    assert check_serializable(h)


def test_bad_spec_values():
    with pytest.raises(ValueError):
        mixed(write_fraction=1.5)
    with pytest.raises(ValueError):
        tpcc_lite(warehouses=3, districts=100)


# --- metrics ----------------------------------------------------------------------------------


def test_latency_cdf_against_sorted_percentiles():
    rng = random.Random(0)
    xs = [rng.randrange(1, 10_000_000) for _ in range(997)]
    cdf = latency_cdf(xs, 10)
    s = sorted(xs)
    assert [p for _, p in cdf] == [10.0 * j for j in range(1, 11)]
    assert cdf[-1][0] == round(s[-1] / 1000, 3)
    # the 50th percentile is the smallest sample with at least half the data at or below it
    assert cdf[4][0] == round(s[498] / 1000, 3)
    assert latency_cdf([], 5) == []


def test_metrics_rates():
    m = Metrics(committed=30, attempts=40, attempt_aborts=10, elapsed_us=2_000_000, committed_ops=90)
    assert m.throughput == 15 and m.ops_throughput == 45 and m.abort_rate == 0.25
