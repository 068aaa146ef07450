import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strombench.broker import (
    Broker,
    OffsetBeyondHead,
    OffsetRegression,
    OwnershipError,
    TopicClosed,
    TopicDrainer,
    TopicExists,
    TopicSink,
    UnknownGroup,
    UnknownPartition,
    UnknownTopic,
    fnv1a_32,
    partition_for_key,
)
from strombench.workload import SinkClosed


def test_fnv1a_reference_vectors():
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"foobar") == 0xBF9CF968
    assert partition_for_key(42, 7) == fnv1a_32(b"42") % 7


def test_route_many_matches_route():
    b = Broker()
    t = b.create_topic("t", 5)
    keys = list(range(3000)) + [2**40, 7]
    assert t.route_many(keys).tolist() == [partition_for_key(k, 5) for k in keys]


def test_topic_errors():
    b = Broker()
    b.create_topic("t", 2)
    with pytest.raises(TopicExists):
        b.create_topic("t", 2)
    with pytest.raises(ValueError):
        b.create_topic("u", 0)
    with pytest.raises(UnknownTopic):
        b.produce("nope", 1, b"x")
    with pytest.raises(UnknownGroup):
        b.consume("g", "t", 0, 10)
    b.register_group("g", "t")
    with pytest.raises(UnknownPartition):
        b.consume("g", "t", 2, 10)


def drain_all(b, group, topic):
    out = {}
    for p in range(b.topic(topic).partition_count):
        while True:
            batch = b.consume(group, topic, p, 7)
            if not len(batch):
                break
            out.setdefault(p, []).extend(batch.records)
            b.commit(group, topic, p, batch.last_offset)
    return out


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), max_size=300), st.integers(1, 6))
def test_keyed_fifo_exactly_once(keys, parts):
    b = Broker()
    b.create_topic("t", parts)
    b.register_group("g", "t")
    sent = [(k, f"{i}:{k}".encode()) for i, k in enumerate(keys)]
    half = len(sent) // 2
    for k, r in sent[:half]:
        b.produce("t", k, r)
    b.produce_batch("t", [r for _, r in sent[half:]], keys=[k for k, _ in sent[half:]])
    got = drain_all(b, "g", "t")
    flat = [r for recs in got.values() for r in recs]
    assert sorted(flat) == sorted(r for _, r in sent)
    for p, recs in got.items():
        # Each partition preserves send order, and holds only its keys.
        assert recs == [r for k, r in sent if partition_for_key(k, parts) == p]
    assert b.lag("g", "t") == [0] * parts


def test_round_robin_and_explicit_partition():
    b = Broker()
    b.create_topic("t", 3)
    b.register_group("g", "t")
    b.produce_batch("t", [bytes([i]) for i in range(9)])
    assert b.lag("g", "t") == [3, 3, 3]
    b.produce_batch("t", [b"a", b"b"], partition=2)
    assert b.lag("g", "t") == [3, 3, 5]
    with pytest.raises(UnknownPartition):
        b.produce_batch("t", [b"a"], partition=3)


def test_commit_rules():
    b = Broker()
    b.create_topic("t", 1)
    b.register_group("g", "t")
    for i in range(5):
        b.produce("t", None, b"r%d" % i)
    with pytest.raises(OffsetBeyondHead):
        b.commit("g", "t", 0, 5)
    b.commit("g", "t", 0, 2)
    assert b.lag("g", "t") == [2]
    with pytest.raises(OffsetRegression):
        b.commit("g", "t", 0, 1)
    # Commit ahead of fetch moves the fetch position too.
    assert b.consume("g", "t", 0, 10).records == [b"r3", b"r4"]


def test_groups_are_independent():
    b = Broker()
    b.create_topic("t", 2)
    b.register_group("a", "t")
    b.register_group("b", "t")
    b.produce_batch("t", [b"1", b"2", b"3"], keys=[1, 2, 3])
    assert sum(len(v) for v in drain_all(b, "a", "t").values()) == 3
    assert sum(b.lag("b", "t")) == 3
    assert sum(len(v) for v in drain_all(b, "b", "t").values()) == 3


def test_ownership():
    b = Broker()
    b.create_topic("t", 1)
    b.register_group("g", "t")
    b.assign("g", "t", 0, owner=1)
    with pytest.raises(OwnershipError):
        b.assign("g", "t", 0, owner=2)
    with pytest.raises(OwnershipError):
        b.consume("g", "t", 0, 1, owner=2)
    b.release("g", "t", 0, owner=1)
    b.assign("g", "t", 0, owner=2)


def test_backpressure_blocks_until_commit():
    b = Broker()
    b.create_topic("t", 1, capacity=2)
    b.register_group("g", "t")
    assert b.produce_batch("t", [b"a", b"b"]) == 0.0
    result = {}

    def produce():
        result["blocked"] = b.produce_batch("t", [b"c"])

    th = threading.Thread(target=produce)
    th.start()
    time.sleep(0.2)
    assert th.is_alive()
    assert b.lag("g", "t") == [2]
    batch = b.consume("g", "t", 0, 1)
    b.commit("g", "t", 0, batch.last_offset)
    th.join(2)
    assert not th.is_alive()
    assert result["blocked"] >= 0.15
    assert drain_all(b, "g", "t") == {0: [b"b", b"c"]}


def test_closed_topic():
    b = Broker()
    b.create_topic("t", 1)
    sink = TopicSink(b, "t")
    assert sink.send([b"x"], [1]) == 0.0
    b.close_topic("t")
    with pytest.raises(TopicClosed):
        b.produce("t", 1, b"y")
    with pytest.raises(SinkClosed):
        sink.send([b"y"], [1])


def test_observers_see_every_record_with_monotone_ts():
    b = Broker()
    t = b.create_topic("t", 2)
    seen = []
    t.add_observer(lambda p, ts, recs: seen.append((p, ts, list(recs))))
    b.produce_batch("t", [b"%d" % i for i in range(100)], keys=list(range(100)))
    b.produce("t", 5, b"last")
    assert sum(len(r) for _, _, r in seen) == 101
    for p in (0, 1):
        ts = [s[1] for s in seen if s[0] == p]
        assert ts == sorted(ts)


def test_consumed_ingest_timestamps():
    b = Broker()
    b.create_topic("t", 1)
    b.register_group("g", "t")
    before = time.time() * 1000
    b.produce_batch("t", [b"a", b"b"])
    batch = b.consume("g", "t", 0, 10)
    assert [o for o, _, _ in batch] == [0, 1]
    assert all(before - 1 <= ts <= time.time() * 1000 + 1 for ts in batch.ingest_ts)


def test_trimming_keeps_offsets_valid():
    b = Broker()
    b.create_topic("t", 1, capacity=1000)
    b.register_group("g", "t")
    total = 0
    for _ in range(200):
        b.produce_batch("t", [b"r"] * 900)
        got = drain_all(b, "g", "t")
        total += len(got.get(0, []))
    assert total == 180_000
    assert b.topic("t").partitions[0]._start > 0


def test_drainer_collects():
    b = Broker()
    b.create_topic("t", 3)
    d = TopicDrainer(b, "t", collect=True).start()
    b.produce_batch("t", [b"%d" % i for i in range(500)], keys=list(range(500)))
    assert d.stop() == 500
    assert sum(len(v) for v in d.records.values()) == 500
    assert b.lag("drain", "t") == [0, 0, 0]
