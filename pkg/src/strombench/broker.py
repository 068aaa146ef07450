"""In-process partitioned message log with consumer groups.

Topics are split into bounded partitions. Producers block when a partition
holds ``capacity`` records that some registered consumer group has not yet
committed; nothing is ever dropped. Records are stamped with an ingest time
(ms since epoch, float) at append.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass
from operator import itemgetter
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from .workload import SinkClosed

DEFAULT_CAPACITY = 1_048_576

# Fully consumed prefixes are dropped once they grow past this many records.
_TRIM_MIN = 65_536
# Keys below this bound route through a lookup table.
_ROUTE_TABLE_MAX = 1 << 20


class BrokerError(Exception):
    pass


class TopicExists(BrokerError):
    pass


class UnknownTopic(BrokerError):
    pass


class TopicClosed(BrokerError):
    pass


class UnknownPartition(BrokerError):
    pass


class UnknownGroup(BrokerError):
    pass


class OffsetRegression(BrokerError):
    pass


class OffsetBeyondHead(BrokerError):
    pass


class OwnershipError(BrokerError):
    pass


_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


def fnv1a_32(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def partition_for_key(key: int, partition_count: int) -> int:
    return fnv1a_32(str(key).encode("ascii")) % partition_count


def now_ms() -> float:
    return time.time_ns() / 1e6


@dataclass
class RecordBatch:
    partition: int
    base_offset: int
    ingest_ts: list[float]
    records: list[bytes]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[tuple[int, float, bytes]]:
        return zip(itertools.count(self.base_offset), self.ingest_ts, self.records)

    @property
    def last_offset(self) -> int:
        return self.base_offset + len(self.records) - 1


Observer = Callable[[int, float, list], None]


class Partition:
    def __init__(self, index: int, capacity: int):
        self.index = index
        self.capacity = capacity
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._records: list[bytes] = []
        self._ts: list[float] = []
        self._start = 0  # offset of _records[0]
        self._floor = 0  # lowest offset some group still needs
        self.next_offset = 0
        self._last_ts = 0.0
        self.closed = False

    def buffered(self) -> int:
        return self.next_offset - self._floor

    def append(self, records: Sequence[bytes]) -> tuple[list[tuple[int, float, list]], float]:
        """Append in order; returns appended chunks and seconds spent blocked."""
        chunks = []
        blocked = 0.0
        i, n = 0, len(records)
        with self._lock:
            while i < n:
                if self.closed:
                    raise TopicClosed(f"partition {self.index} is closed")
                free = self.capacity - (self.next_offset - self._floor)
                if free <= 0:
                    t0 = time.perf_counter()
                    self._not_full.wait(0.1)
                    blocked += time.perf_counter() - t0
                    continue
                chunk = list(records[i:i + free]) if (i or free < n) else list(records)
                ts = now_ms()
                if ts < self._last_ts:
                    ts = self._last_ts
                self._last_ts = ts
                self._records.extend(chunk)
                self._ts.extend(itertools.repeat(ts, len(chunk)))
                chunks.append((self.next_offset, ts, chunk))
                self.next_offset += len(chunk)
                i += len(chunk)
        return chunks, blocked

    def read(self, offset: int, max_batch: int) -> tuple[list[float], list[bytes]]:
        with self._lock:
            i = offset - self._start
            if i < 0:
                raise UnknownPartition(f"offset {offset} already trimmed from partition {self.index}")
            return self._ts[i:i + max_batch], self._records[i:i + max_batch]

    def advance_floor(self, floor: int) -> None:
        with self._lock:
            if floor <= self._floor:
                return
            self._floor = floor
            drop = floor - self._start
            if drop >= _TRIM_MIN and drop * 2 >= len(self._records):
                del self._records[:drop]
                del self._ts[:drop]
                self._start = floor
            self._not_full.notify_all()

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self._not_full.notify_all()


class _Position:
    __slots__ = ("position", "committed", "owner", "lock")

    def __init__(self, start: int):
        self.position = start
        self.committed = start - 1
        self.owner: object | None = None
        self.lock = threading.Lock()


class ConsumerGroup:
    def __init__(self, group_id: str):
        self.group_id = group_id
        self._positions: dict[tuple[str, int], _Position] = {}

    def committed_offset(self, topic: str, partition: int) -> int:
        """Last committed offset, ``-1`` when nothing is committed."""
        return self._positions[(topic, partition)].committed


class PartitionedTopic:
    def __init__(self, name: str, partition_count: int, capacity: int):
        self.name = name
        self.partitions = [Partition(i, capacity) for i in range(partition_count)]
        self.partition_count = partition_count
        self.capacity = capacity
        self.groups: dict[str, ConsumerGroup] = {}
        self.observers: list[Observer] = []
        self._route: dict[int, int] = {}
        self._route_table = np.empty(0, dtype=np.int64)
        self._rr = 0
        self._rr_lock = threading.Lock()
        self._data = threading.Condition()
        self.closed = False

    def route(self, key: int) -> int:
        p = self._route.get(key)
        if p is None:
            p = self._route[key] = partition_for_key(key, self.partition_count)
        return p

    def route_many(self, keys) -> np.ndarray:
        arr = np.asarray(keys, dtype=np.int64)
        if arr.size and 0 <= arr.min() and arr.max() < _ROUTE_TABLE_MAX:
            hi = int(arr.max()) + 1
            table = self._route_table
            if hi > len(table):
                grown = np.fromiter((partition_for_key(k, self.partition_count) for k in range(len(table), hi)),
                                    dtype=np.int64, count=hi - len(table))
                table = self._route_table = np.concatenate([table, grown])
            return table[arr]
        return np.fromiter((self.route(int(k)) for k in arr), dtype=np.int64, count=arr.size)

    def next_round_robin(self, n: int = 1) -> int:
        with self._rr_lock:
            start = self._rr
            self._rr += n
        return start % self.partition_count

    def add_observer(self, fn: Observer) -> None:
        self.observers.append(fn)

    def _notify(self, chunks_by_partition) -> None:
        for p, chunks in chunks_by_partition:
            for _, ts, chunk in chunks:
                for fn in self.observers:
                    fn(p, ts, chunk)
        with self._data:
            self._data.notify_all()

    def wait_for_data(self, timeout: float) -> None:
        with self._data:
            self._data.wait(timeout)

    def update_floor(self, partition: int) -> None:
        floor = min(g._positions[(self.name, partition)].committed + 1 for g in self.groups.values())
        self.partitions[partition].advance_floor(floor)


class ExternalBrokerAdapter(Protocol):
    """Contract a wire-protocol broker client must meet to replace ``Broker``.

    Semantics match ``Broker``: keyed produce routes by ``fnv1a_32`` of the
    key's decimal string; consume returns records after the group position;
    commit takes the last processed offset and never moves backwards.
    """

    def create_topic(self, name: str, partition_count: int, capacity: int) -> object: ...

    def produce(self, topic: str, key: int | None, record: bytes) -> tuple[int, int]: ...

    def produce_batch(self, topic: str, records: Sequence[bytes], keys: Sequence[int] | None = None,
                      partition: int | None = None) -> float: ...

    def consume(self, group: str, topic: str, partition: int, max_batch: int,
                owner: object | None = None) -> RecordBatch: ...

    def commit(self, group: str, topic: str, partition: int, offset: int) -> None: ...

    def lag(self, group: str, topic: str) -> list[int]: ...


class Broker:
    """Registry of topics and consumer groups."""

    def __init__(self):
        self._topics: dict[str, PartitionedTopic] = {}
        self._groups: dict[str, ConsumerGroup] = {}
        self._lock = threading.Lock()

    def create_topic(self, name: str, partition_count: int, capacity: int = DEFAULT_CAPACITY) -> PartitionedTopic:
        if partition_count < 1:
            raise ValueError(f"partition_count must be >= 1, got {partition_count}")
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        with self._lock:
            if name in self._topics:
                raise TopicExists(name)
            topic = self._topics[name] = PartitionedTopic(name, partition_count, int(capacity))
        return topic

    def topic(self, name: str) -> PartitionedTopic:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    def close_topic(self, name: str) -> None:
        topic = self.topic(name)
        topic.closed = True
        for p in topic.partitions:
            p.close()
        with topic._data:
            topic._data.notify_all()

    def register_group(self, group_id: str, topic: str) -> ConsumerGroup:
        """Subscribe ``group_id`` to ``topic``, starting at the oldest retained record."""
        t = self.topic(topic)
        with self._lock:
            group = self._groups.setdefault(group_id, ConsumerGroup(group_id))
            for p in t.partitions:
                group._positions.setdefault((topic, p.index), _Position(p._start))
            t.groups[group_id] = group
        return group

    def _position(self, group: str, topic: str, partition: int) -> tuple[PartitionedTopic, _Position]:
        t = self.topic(topic)
        if not 0 <= partition < t.partition_count:
            raise UnknownPartition(f"{topic}[{partition}]")
        try:
            return t, t.groups[group]._positions[(topic, partition)]
        except KeyError:
            raise UnknownGroup(f"group {group!r} is not registered on {topic!r}") from None

    def assign(self, group: str, topic: str, partition: int, owner: object) -> None:
        """Give ``owner`` exclusive consumption of a partition within ``group``."""
        _, pos = self._position(group, topic, partition)
        with pos.lock:
            if pos.owner is not None and pos.owner != owner:
                raise OwnershipError(f"{topic}[{partition}] in group {group!r} is owned by {pos.owner!r}")
            pos.owner = owner

    def release(self, group: str, topic: str, partition: int, owner: object) -> None:
        _, pos = self._position(group, topic, partition)
        with pos.lock:
            if pos.owner == owner:
                pos.owner = None

    def produce(self, topic: str, key: int | None, record: bytes) -> tuple[int, int]:
        t = self.topic(topic)
        if t.closed:
            raise TopicClosed(topic)
        p = t.route(key) if key is not None else t.next_round_robin()
        chunks, _ = t.partitions[p].append([record])
        t._notify([(p, chunks)])
        return p, chunks[0][0]

    def produce_batch(self, topic: str, records: Sequence[bytes], keys: Sequence[int] | None = None,
                      partition: int | None = None) -> float:
        """Append many records; returns seconds the caller spent blocked.

        With ``keys`` each record is routed like ``produce``; with
        ``partition`` all go to that partition; otherwise round-robin.
        """
        t = self.topic(topic)
        if t.closed:
            raise TopicClosed(topic)
        n = t.partition_count
        if partition is not None:
            if not 0 <= partition < n:
                raise UnknownPartition(f"{topic}[{partition}]")
            buckets = {partition: records}
        elif keys is not None:
            if n == 1:
                buckets = {0: records}
            else:
                parts = t.route_many(keys)
                buckets = {}
                for p in range(n):
                    idx = np.flatnonzero(parts == p).tolist()
                    if len(idx) > 1:
                        buckets[p] = list(itemgetter(*idx)(records))
                    elif idx:
                        buckets[p] = [records[idx[0]]]
        else:
            start = t.next_round_robin(len(records))
            buckets = {p: records[(p - start) % n::n] for p in range(n)}
            buckets = {p: lst for p, lst in buckets.items() if len(lst)}
        blocked = 0.0
        appended = []
        for p, recs in buckets.items():
            chunks, b = t.partitions[p].append(recs)
            blocked += b
            appended.append((p, chunks))
        t._notify(appended)
        return blocked

    def consume(self, group: str, topic: str, partition: int, max_batch: int,
                owner: object | None = None) -> RecordBatch:
        t, pos = self._position(group, topic, partition)
        with pos.lock:
            if pos.owner is not None and owner is not None and pos.owner != owner:
                raise OwnershipError(f"{topic}[{partition}] in group {group!r} is owned by {pos.owner!r}")
            base = pos.position
            ts, recs = t.partitions[partition].read(base, max_batch)
            pos.position = base + len(recs)
        return RecordBatch(partition, base, ts, recs)

    def commit(self, group: str, topic: str, partition: int, offset: int) -> None:
        """Mark ``offset`` (inclusive) as processed by ``group``."""
        t, pos = self._position(group, topic, partition)
        head = t.partitions[partition].next_offset
        with pos.lock:
            if offset >= head:
                raise OffsetBeyondHead(f"offset {offset} >= head {head} of {topic}[{partition}]")
            if offset < pos.committed:
                raise OffsetRegression(f"offset {offset} < committed {pos.committed} of {topic}[{partition}]")
            pos.committed = offset
            if pos.position <= offset:
                pos.position = offset + 1
        t.update_floor(partition)

    def lag(self, group: str, topic: str) -> list[int]:
        t = self.topic(topic)
        if group not in t.groups:
            raise UnknownGroup(f"group {group!r} is not registered on {topic!r}")
        return [
            p.next_offset - (self._position(group, topic, p.index)[1].committed + 1)
            for p in t.partitions
        ]


class TopicSink:
    """Generator sink producing keyed records into a topic."""

    def __init__(self, broker: Broker, topic: str):
        self.broker = broker
        self.topic = topic

    def send(self, records: list[bytes], keys: Sequence[int]) -> float:
        try:
            return self.broker.produce_batch(self.topic, records, keys)
        except TopicClosed as exc:
            raise SinkClosed(str(exc)) from exc


class TopicDrainer:
    """Background consumer that keeps a topic's buffers from filling.

    Stands in for whatever reads the egestion side; counts what it sees and
    optionally keeps the records for inspection.
    """

    def __init__(self, broker: Broker, topic: str, group: str = "drain", collect: bool = False,
                 max_batch: int = 65_536):
        self.broker = broker
        self.topic = topic
        self.group = group
        self.collect = collect
        self.max_batch = max_batch
        self.count = 0
        self.records: dict[int, list[bytes]] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        broker.register_group(group, topic)

    def poll(self) -> int:
        got = 0
        t = self.broker.topic(self.topic)
        for p in range(t.partition_count):
            batch = self.broker.consume(self.group, self.topic, p, self.max_batch)
            if len(batch):
                got += len(batch)
                if self.collect:
                    self.records.setdefault(p, []).extend(batch.records)
                self.broker.commit(self.group, self.topic, p, batch.last_offset)
        self.count += got
        return got

    def _loop(self) -> None:
        t = self.broker.topic(self.topic)
        while True:
            got = self.poll()
            if not got:
                if self._stop.is_set():
                    return
                t.wait_for_data(0.005)

    def start(self) -> "TopicDrainer":
        self._thread = threading.Thread(target=self._loop, name=f"drain-{self.topic}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> int:
        """Stop after everything currently buffered has been read."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.count
