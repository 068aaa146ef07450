"""Throughput, latency and process metrics at the pipeline tap points."""

from __future__ import annotations

import csv
import gc
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import psutil

from .events import peek_timestamps

logger = logging.getLogger(__name__)

TAPS = ("generator", "broker_in", "processor", "broker_out")
LATENCY_KINDS = ("driver", "processing", "end_to_end")
TAP_LATENCY = {"broker_in": "driver", "processor": "processing", "broker_out": "end_to_end"}

MB = 1_000_000

THROUGHPUT_COLUMNS = ("ts_ms", "events_total", "bytes_total", "events_per_s", "mb_per_s")
LATENCY_COLUMNS = ("ts_ms", "kind", "count", "p50_us", "p95_us", "p99_us", "max_us")
PROCESS_COLUMNS = ("ts_ms", "cpu_percent", "rss_bytes", "reclaim_count", "reclaim_time_ms", "source")
EXTERNAL_COLUMNS = ("ts_ms", "metric", "value")

# Buckets: 0 is [0, 1) µs; j in 1..54 is [2^((j-1)/2), 2^(j/2)) µs; 55 is overflow.
# 2^27 µs ≈ 134 s, so the bounded buckets cover 1 µs .. 100 s.
_TOP_EXP = 54
NUM_BUCKETS = _TOP_EXP + 2
OVERFLOW = NUM_BUCKETS - 1


class EmptyHistogram(ValueError):
    pass


class NegativeLatency(ValueError):
    def __init__(self, kind: str, value_us: float):
        super().__init__(f"negative {kind} latency {value_us:.1f} us (clock skew?)")
        self.kind = kind
        self.value_us = value_us


def bucket_bounds(j: int) -> tuple[float, float]:
    if j == 0:
        return 0.0, 1.0
    if j == OVERFLOW:
        return 2.0 ** (_TOP_EXP / 2), math.inf
    return 2.0 ** ((j - 1) / 2), 2.0 ** (j / 2)


def bucket_index(value_us: float) -> int:
    if value_us < 1.0:
        return 0
    k = int(math.floor(2 * math.log2(value_us)))
    if value_us < 2.0 ** (k / 2):
        k -= 1
    elif value_us >= 2.0 ** ((k + 1) / 2):
        k += 1
    return min(k + 1, OVERFLOW)


def bucket_indices(values_us: np.ndarray) -> np.ndarray:
    v = np.asarray(values_us, dtype=np.float64)
    out = np.zeros(v.shape, dtype=np.int64)
    pos = v >= 1.0
    if pos.any():
        vp = v[pos]
        k = np.floor(2 * np.log2(vp)).astype(np.int64)
        k -= vp < np.exp2(k / 2)
        k += vp >= np.exp2((k + 1) / 2)
        out[pos] = np.minimum(k + 1, OVERFLOW)
    return out


class LatencyHistogram:
    """Log-bucketed latency histogram, bucket ratio sqrt(2)."""

    def __init__(self):
        self.counts = np.zeros(NUM_BUCKETS, dtype=np.int64)
        self.total = 0
        self.max = 0.0
        self.sum = 0.0

    def record(self, value_us: float, count: int = 1) -> None:
        self.counts[bucket_index(value_us)] += count
        self.total += count
        self.sum += value_us * count
        if value_us > self.max:
            self.max = value_us

    def record_array(self, values_us: np.ndarray) -> None:
        if len(values_us) == 0:
            return
        self.counts += np.bincount(bucket_indices(values_us), minlength=NUM_BUCKETS)
        self.total += len(values_us)
        self.sum += float(np.sum(values_us))
        m = float(np.max(values_us))
        if m > self.max:
            self.max = m

    def merge(self, other: "LatencyHistogram") -> None:
        self.counts += other.counts
        self.total += other.total
        self.sum += other.sum
        self.max = max(self.max, other.max)

    def copy(self) -> "LatencyHistogram":
        h = LatencyHistogram()
        h.merge(self)
        return h

    @property
    def mean(self) -> float:
        return self.sum / self.total if self.total else math.nan

    def midpoint(self, j: int) -> float:
        if j == OVERFLOW:
            return self.max
        lo, hi = bucket_bounds(j)
        return (lo + hi) / 2

    def percentile(self, q: float) -> float:
        return percentile(self, q)


def percentile(hist: LatencyHistogram, q: float) -> float:
    """Midpoint of the first bucket whose cumulative count reaches ``q * total``."""
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    total = int(hist.counts.sum())
    if total == 0:
        raise EmptyHistogram("percentile of an empty histogram")
    need = q * total
    cum = np.cumsum(hist.counts)
    j = int(np.searchsorted(cum, need - 1e-9 * total, side="left"))
    return hist.midpoint(min(j, OVERFLOW))


def latency_of(kind: str, creation_ts: float | None = None, broker_ingest_ts: float | None = None,
               proc_ingest_ts: float | None = None, egress_ts: float | None = None) -> float:
    """Latency in microseconds from millisecond timestamps on one clock.

    ``egress_ts`` is egress from the processor for ``processing`` and
    arrival at the egestion broker for ``end_to_end``.
    """
    if kind == "driver":
        delta = broker_ingest_ts - creation_ts
    elif kind == "processing":
        delta = egress_ts - proc_ingest_ts
    elif kind == "end_to_end":
        delta = egress_ts - creation_ts
    else:
        raise ValueError(f"unknown latency kind {kind!r}")
    us = delta * 1000.0
    if us < 0:
        raise NegativeLatency(kind, us)
    return us


class _Shard:
    __slots__ = ("events", "bytes", "hists", "negative")

    def __init__(self):
        self.events = dict.fromkeys(TAPS, 0)
        self.bytes = dict.fromkeys(TAPS, 0)
        self.hists = {k: LatencyHistogram() for k in LATENCY_KINDS}
        self.negative = dict.fromkeys(LATENCY_KINDS, 0)


class MetricsRegistry:
    """Per-thread sharded counters for the four tap points.

    Recording touches only the calling thread's shard; readers merge shards.
    A reader racing a recorder can miss that recorder's in-flight update,
    never a completed one.
    """

    def __init__(self, latency_sample_every: int = 1):
        self.latency_sample_every = max(1, int(latency_sample_every))
        self._local = threading.local()
        self._shards: list[_Shard] = []
        self._lock = threading.Lock()

    def _shard(self) -> _Shard:
        shard = getattr(self._local, "shard", None)
        if shard is None:
            shard = self._local.shard = _Shard()
            with self._lock:
                self._shards.append(shard)
        return shard

    def record(self, tap: str, byte_count: int, latency_kind: str | None = None,
               latency_us: float | None = None) -> None:
        shard = self._shard()
        shard.events[tap] += 1
        shard.bytes[tap] += byte_count
        if latency_kind is not None and latency_us is not None:
            shard.hists[latency_kind].record(latency_us)

    def record_batch(self, tap: str, n: int, nbytes: int, latency_kind: str | None = None,
                     latencies_us: Sequence[float] | np.ndarray | None = None) -> None:
        shard = self._shard()
        shard.events[tap] += n
        shard.bytes[tap] += nbytes
        if latency_kind is not None and latencies_us is not None and len(latencies_us):
            lat = np.asarray(latencies_us, dtype=np.float64)
            neg = lat < 0
            if neg.any():
                shard.negative[latency_kind] += int(neg.sum())
                lat = lat[~neg]
            shard.hists[latency_kind].record_array(lat)

    def record_latency(self, kind: str, latency_us: float, count: int = 1) -> None:
        if latency_us < 0:
            self._shard().negative[kind] += count
            return
        self._shard().hists[kind].record(latency_us, count)

    def flag_negative(self, kind: str, count: int = 1) -> None:
        self._shard().negative[kind] += count

    def totals(self, tap: str) -> tuple[int, int]:
        shards = list(self._shards)
        return sum(s.events[tap] for s in shards), sum(s.bytes[tap] for s in shards)

    def histogram(self, kind: str) -> LatencyHistogram:
        h = LatencyHistogram()
        for s in list(self._shards):
            h.merge(s.hists[kind])
        return h

    def negative_flags(self) -> dict[str, int]:
        shards = list(self._shards)
        return {k: sum(s.negative[k] for s in shards) for k in LATENCY_KINDS}

    def broker_observer(self, tap: str):
        """Topic observer recording counts and creation-to-ingest latency."""
        kind = TAP_LATENCY[tap]
        every = self.latency_sample_every

        def observe(partition: int, ingest_ts: float, records: list[bytes]) -> None:
            sampled = records[::every] if every > 1 else records
            created = peek_timestamps(sampled)
            self.record_batch(tap, len(records), sum(map(len, records)), kind, (ingest_ts - created) * 1000.0)

        return observe


@dataclass
class ProcessSample:
    cpu_percent: float
    resident_memory_bytes: int
    reclaim_count: int
    reclaim_time_ms: float
    source: str = "none"


class _GcTracker:
    """Counts collector passes and the wall time they take."""

    def __init__(self):
        self.count = 0
        self.time_ms = 0.0
        self._t0 = 0.0
        gc.callbacks.append(self._callback)

    def _callback(self, phase: str, info: dict) -> None:
        if phase == "start":
            self._t0 = time.perf_counter()
        else:
            self.count += 1
            self.time_ms += (time.perf_counter() - self._t0) * 1000


_gc_tracker: _GcTracker | None = None
_gc_lock = threading.Lock()


def _tracker() -> _GcTracker:
    global _gc_tracker
    with _gc_lock:
        if _gc_tracker is None:
            _gc_tracker = _GcTracker()
    return _gc_tracker


class ProcessProbe:
    """Samples the current process: CPU, resident memory, collector activity."""

    source = "python_gc"

    def __init__(self, pid: int | None = None):
        self._gc = _tracker()
        try:
            self._proc = psutil.Process(pid or os.getpid())
            self._proc.cpu_percent(None)
        except psutil.Error:
            self._proc = None

    def sample(self) -> ProcessSample:
        cpu, rss = 0.0, 0
        if self._proc is not None:
            cpu = self._proc.cpu_percent(None)
            rss = self._proc.memory_info().rss
        return ProcessSample(cpu, rss, self._gc.count, self._gc.time_ms, self.source)


class NullProbe:
    source = "none"

    def sample(self) -> ProcessSample:
        return ProcessSample(0.0, 0, 0, 0.0, "none")


# ---------------------------------------------------------------------------
# CSV series


@dataclass
class MetricSeries:
    """Rows of samples, first column ``ts_ms`` strictly increasing."""

    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def parse_cell(text: str) -> Any:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


class SeriesOrderError(ValueError):
    pass


def _check_increasing(rows: Iterable[tuple], start: float | None = None) -> None:
    prev = start
    for r in rows:
        if prev is not None and r[0] <= prev:
            raise SeriesOrderError(f"ts_ms {r[0]} is not after {prev}")
        prev = r[0]


def write_series(series: MetricSeries, path: str | Path) -> Path:
    _check_increasing(series.rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.columns)
        for row in series.rows:
            w.writerow([format_cell(v) for v in row])
    return path


def read_series(path: str | Path, name: str | None = None) -> MetricSeries:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = [tuple(parse_cell(c) for c in row) for row in reader]
    return MetricSeries(name or path.stem, header, rows)


class SeriesWriter:
    """Appends rows to one CSV, flushing at least every ``flush_every_s``."""

    def __init__(self, path: Path, columns: Sequence[str], flush_every_s: float = 10.0):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._last_ts: float | None = None
        self._flush_every = flush_every_s
        self._last_flush = time.monotonic()

    def append(self, row: Sequence) -> None:
        if self._last_ts is not None and row[0] <= self._last_ts:
            raise SeriesOrderError(f"ts_ms {row[0]} is not after {self._last_ts}")
        self._last_ts = row[0]
        self._w.writerow([format_cell(v) for v in row])
        if time.monotonic() - self._last_flush >= self._flush_every:
            self.flush()

    def flush(self) -> None:
        self._fh.flush()
        self._last_flush = time.monotonic()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()


# ---------------------------------------------------------------------------
# Snapshots


def _percentiles(h: LatencyHistogram) -> tuple:
    if h.total == 0:
        return (0, None, None, None, None)
    return (h.total, h.percentile(0.5), h.percentile(0.95), h.percentile(0.99), h.max)


class Snapshotter:
    """Turns registry state into periodic CSV rows.

    ``sample`` is pure bookkeeping and can be driven manually with explicit
    timestamps; ``start`` runs it on a background thread every interval.
    """

    def __init__(self, registry: MetricsRegistry, out_dir: str | Path | None = None,
                 interval_ms: int = 1000, probe=None, start_ms: int | None = None):
        if interval_ms < 100:
            raise ValueError("snapshot interval must be >= 100 ms")
        self.registry = registry
        self.interval_ms = interval_ms
        self.probe = probe if probe is not None else ProcessProbe()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._prev_ms = start_ms if start_ms is not None else int(time.time() * 1000)
        self._prev = {tap: (0, 0) for tap in TAPS}
        self.series: dict[str, MetricSeries] = {}
        for tap in TAPS:
            self.series[f"throughput_{tap}"] = MetricSeries(f"throughput_{tap}", THROUGHPUT_COLUMNS)
        for kind in LATENCY_KINDS:
            self.series[f"latency_{kind}"] = MetricSeries(f"latency_{kind}", LATENCY_COLUMNS)
        self.series["process"] = MetricSeries("process", PROCESS_COLUMNS)
        self._writers: dict[str, SeriesWriter] = {}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for name, s in self.series.items():
                self._writers[name] = SeriesWriter(self.out_dir / f"{name}.csv", s.columns)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._sample_lock = threading.Lock()

    def sample(self, now_ms: int | None = None) -> dict[str, tuple]:
        with self._sample_lock:
            now = int(time.time() * 1000) if now_ms is None else int(now_ms)
            if now <= self._prev_ms:
                now = self._prev_ms + 1
            elapsed_s = (now - self._prev_ms) / 1000
            rows: dict[str, tuple] = {}
            for tap in TAPS:
                ev, by = self.registry.totals(tap)
                pev, pby = self._prev[tap]
                rows[f"throughput_{tap}"] = (now, ev, by, (ev - pev) / elapsed_s, (by - pby) / MB / elapsed_s)
                self._prev[tap] = (ev, by)
            for kind in LATENCY_KINDS:
                rows[f"latency_{kind}"] = (now, kind) + _percentiles(self.registry.histogram(kind))
            p = self.probe.sample()
            rows["process"] = (now, p.cpu_percent, p.resident_memory_bytes, p.reclaim_count,
                               p.reclaim_time_ms, p.source)
            self._prev_ms = now
            for name, row in rows.items():
                self.series[name].rows.append(row)
                if name in self._writers:
                    self._writers[name].append(row)
            return rows

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_ms / 1000):
            try:
                self.sample()
            except Exception:
                logger.exception("snapshot failed")

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name="snapshotter", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.sample()
        self.close()

    def close(self) -> None:
        for w in self._writers.values():
            w.close()
