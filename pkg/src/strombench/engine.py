"""Reference stream-processing engine running one of three pipelines.

Workers consume the ingestion topic, transform batches and write to the
egestion topic. Worker ``i`` owns every input partition ``p`` with
``p % parallelism == i``, so keyed window state never crosses workers.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import threading
from dataclasses import dataclass, field
from typing import Any, Sequence

from .broker import Broker, now_ms
from .events import SensorEvent, format_temperature

logger = logging.getLogger(__name__)

ENGINE_GROUP = "engine"
DEFAULT_MAX_BATCH = 4096
IDLE_WAIT_S = 0.005


class PartitionAssignmentError(ValueError):
    pass


class ConfinementError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Pure operators


def to_fahrenheit(temperature_c: float) -> float:
    if not math.isfinite(temperature_c):
        raise ValueError(f"temperature must be finite, got {temperature_c!r}")
    return temperature_c * 9 / 5 + 32


def threshold_detect(temperature_f: float, threshold_f: float) -> bool:
    return temperature_f > threshold_f


def assign_windows(event_ts_ms: int, window_len_ms: int, slide_ms: int) -> list[int]:
    """Start times of every aligned window containing ``event_ts_ms``.

    Windows are ``[s, s + len)`` with ``s`` a non-negative multiple of the
    slide, so early timestamps belong to fewer than ``len / slide`` windows.
    """
    first = max(0, ((event_ts_ms - window_len_ms) // slide_ms + 1) * slide_ms)
    last = (event_ts_ms // slide_ms) * slide_ms
    return list(range(first, last + 1, slide_ms))


@dataclass(frozen=True)
class WindowResult:
    window_start_ms: int
    window_end_ms: int
    sensor_id: int
    avg_temperature_c: float
    event_count: int
    # creation time of the latest contributing event, for end-to-end latency
    created_at: int = 0


class WindowState:
    """Per-(sensor, window) running sums with compensated accumulation."""

    def __init__(self, window_len_ms: int, slide_ms: int, owner_check: tuple[dict, Any] | None = None):
        self.window_len_ms = window_len_ms
        self.slide_ms = slide_ms
        # start -> sensor_id -> [sum, compensation, count, last_created, last_ingest]
        self.cells: dict[int, dict[int, list]] = {}
        self.watermark = -1
        # Windows ending at or before this were already emitted.
        self.flushed_to: float = -1
        self._owner_check = owner_check

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def update(self, sensor_id: int, ts: int, temperature_c: float, created_at: int = 0,
               ingest_ms: float = 0.0) -> int:
        """Add one observation; returns how many open windows it landed in."""
        touched = 0
        for start in assign_windows(ts, self.window_len_ms, self.slide_ms):
            if start + self.window_len_ms <= self.flushed_to:
                continue
            touched += 1
            by_key = self.cells.get(start)
            if by_key is None:
                by_key = self.cells[start] = {}
            cell = by_key.get(sensor_id)
            if cell is None:
                if self._owner_check is not None:
                    owners, me = self._owner_check
                    holder = owners.setdefault((sensor_id, start), me)
                    if holder != me:
                        raise ConfinementError(f"cell {(sensor_id, start)} touched by {holder} and {me}")
                by_key[sensor_id] = [temperature_c, 0.0, 1, created_at, ingest_ms]
                continue
            s = cell[0]
            t = s + temperature_c
            if abs(s) >= abs(temperature_c):
                cell[1] += (s - t) + temperature_c
            else:
                cell[1] += (temperature_c - t) + s
            cell[0] = t
            cell[2] += 1
            cell[3] = created_at
            cell[4] = ingest_ms
        if ts > self.watermark:
            self.watermark = ts
        return touched

    def flush(self, watermark_ms: float) -> list[tuple[WindowResult, float]]:
        """Emit and evict windows ending at or before ``watermark_ms``.

        Returns ``(result, last_ingest_ms)`` ordered by window start, then sensor.
        """
        out = []
        if watermark_ms > self.flushed_to:
            self.flushed_to = watermark_ms
        for start in sorted(s for s in self.cells if s + self.window_len_ms <= watermark_ms):
            by_key = self.cells.pop(start)
            for sid in sorted(by_key):
                total, comp, n, created, ingest = by_key[sid]
                out.append((
                    WindowResult(start, start + self.window_len_ms, sid, (total + comp) / n, n, created),
                    ingest,
                ))
        return out


def window_update(state: WindowState, e: SensorEvent, ts: int | None = None) -> None:
    state.update(e.sensor_id, e.created_at if ts is None else ts, e.temperature_c, e.created_at)


def window_flush(state: WindowState, watermark_ms: float) -> list[WindowResult]:
    return [r for r, _ in state.flush(watermark_ms)]


# ---------------------------------------------------------------------------
# Output encodings; every record keeps the creation timestamp in slot 0.


def encode_cpu_output(ts: int, sensor_id: int, temperature_c: float, temperature_f: float, flagged: bool) -> bytes:
    return ("[%d,%d,%s,%.2f,%s]" % (
        ts, sensor_id, format_temperature(temperature_c), temperature_f, "true" if flagged else "false"
    )).encode("ascii")


def decode_cpu_output(record: bytes) -> dict[str, Any]:
    ts, sid, t, tf, flag = json.loads(record)
    return {"ts": ts, "id": sid, "t": float(t), "tf": float(tf), "flag": flag}


def encode_window_result(r: WindowResult) -> bytes:
    return ("[%d,%d,%d,%d,%r,%d]" % (
        r.created_at, r.sensor_id, r.window_start_ms, r.window_end_ms, r.avg_temperature_c, r.event_count
    )).encode("ascii")


def decode_window_result(record: bytes) -> WindowResult:
    ts, sid, ws, we, avg, n = json.loads(record)
    return WindowResult(ws, we, sid, float(avg), n, ts)


# ---------------------------------------------------------------------------
# Pipelines


@dataclass(frozen=True)
class PipelineDefinition:
    kind: str = "pass_through"
    parallelism: int = 1
    threshold_f: float = 122.0
    window_len_ms: int = 5000
    window_slide_ms: int = 1000
    parse_in_passthrough: bool = False
    window_time: str = "processing"  # or "event": windows on created_at
    executor: str = "thread"  # or "process"
    max_batch: int = DEFAULT_MAX_BATCH

    @classmethod
    def from_config(cls, pl: dict) -> "PipelineDefinition":
        return cls(
            kind=pl["kind"],
            parallelism=pl["parallelism"],
            threshold_f=float(pl["threshold_f"]),
            window_len_ms=pl["window_len_ms"],
            window_slide_ms=pl["window_slide_ms"],
            parse_in_passthrough=pl["parse_in_passthrough"],
            window_time=pl["window_time"],
            executor=pl["executor"],
        )

    def check(self, input_partitions: int) -> None:
        if self.kind not in ("pass_through", "cpu_intensive", "memory_intensive"):
            raise ValueError(f"unknown pipeline kind {self.kind!r}")
        if self.parallelism < 1:
            raise PartitionAssignmentError("parallelism must be >= 1")
        if self.parallelism > input_partitions:
            raise PartitionAssignmentError(
                f"parallelism {self.parallelism} exceeds {input_partitions} input partitions")
        if self.kind == "memory_intensive":
            if self.window_slide_ms < 1 or self.window_len_ms % self.window_slide_ms:
                raise ValueError("window_slide_ms must divide window_len_ms")
        if self.executor not in ("thread", "process"):
            raise ValueError(f"unknown executor {self.executor!r}")


@dataclass
class ProcessOutput:
    records: list[bytes]
    # Routing keys for outputs, or None to keep the input partition.
    keys: list[int] | None = None
    # Proc-ingest time per output for latency, or None when all share the batch time.
    ingest_refs: list[float] | None = None


class BatchProcessor:
    """Stateful per-worker transform of raw input batches.

    Window state is kept per input partition. Keyed routing puts each sensor
    on one partition and partitions are read in order, so each partition's
    own watermark never runs ahead of its data.
    """

    def __init__(self, defn: PipelineDefinition, owner_check: tuple[dict, Any] | None = None):
        self.defn = defn
        self.processed = 0
        self.outputs = 0
        self.late_events = 0
        self._owner_check = owner_check
        self._expected: set[tuple[int, int, int]] = set()
        self._states: dict[int, WindowState] = {}
        self._last_boundary: dict[int, int] = {}

    def process(self, records: Sequence[bytes], ingest_ms: float, partition: int = 0) -> ProcessOutput:
        self.processed += len(records)
        kind = self.defn.kind
        if kind == "pass_through":
            out = self._pass_through(records)
        elif kind == "cpu_intensive":
            out = self._cpu(records)
        else:
            out = self._memory(records, ingest_ms, partition)
        self.outputs += len(out.records)
        return out

    def _pass_through(self, records: Sequence[bytes]) -> ProcessOutput:
        if not self.defn.parse_in_passthrough:
            return ProcessOutput(list(records))
        from .events import deserialize_event, serialize_event

        return ProcessOutput([serialize_event(deserialize_event(r), len(r)).data for r in records])

    def _cpu(self, records: Sequence[bytes]) -> ProcessOutput:
        loads = json.loads
        thr = self.defn.threshold_f
        out = []
        for r in records:
            ts, sid, t = loads(r)[:3]
            tf = t * 9 / 5 + 32
            out.append(encode_cpu_output(ts, sid, t, tf, tf > thr))
        return ProcessOutput(out)

    def _state(self, partition: int) -> WindowState:
        state = self._states.get(partition)
        if state is None:
            state = self._states[partition] = WindowState(
                self.defn.window_len_ms, self.defn.window_slide_ms, self._owner_check)
            self._last_boundary[partition] = -1
        return state

    def _memory(self, records: Sequence[bytes], ingest_ms: float, partition: int) -> ProcessOutput:
        state = self._state(partition)
        loads = json.loads
        by_event_time = self.defn.window_time == "event"
        proc_ts = int(ingest_ms)
        wlen, slide = self.defn.window_len_ms, self.defn.window_slide_ms
        expected = self._expected
        for r in records:
            created, sid, t = loads(r)[:3]
            ts = created if by_event_time else proc_ts
            for s in assign_windows(ts, wlen, slide):
                expected.add((partition, sid, s))
            if not state.update(sid, ts, float(t), created, ingest_ms):
                self.late_events += 1
        return self._emit(self._maybe_flush(partition, state.watermark))

    def _maybe_flush(self, partition: int, watermark: float) -> list[tuple[WindowResult, float]]:
        boundary = int(watermark // self.defn.window_slide_ms)
        if boundary <= self._last_boundary[partition]:
            return []
        self._last_boundary[partition] = boundary
        return self._states[partition].flush(boundary * self.defn.window_slide_ms)

    def _emit(self, flushed: list[tuple[WindowResult, float]]) -> ProcessOutput:
        return ProcessOutput(
            [encode_window_result(r) for r, _ in flushed],
            [r.sensor_id for r, _ in flushed],
            [ingest for _, ingest in flushed],
        )

    def tick(self, now: float) -> ProcessOutput:
        """Advance processing time while idle; only processing-time windows move."""
        if self.defn.window_time != "processing":
            return ProcessOutput([])
        flushed = []
        for p in sorted(self._states):
            flushed += self._maybe_flush(p, now)
        out = self._emit(flushed)
        self.outputs += len(out.records)
        return out

    def flush_all(self) -> ProcessOutput:
        flushed = []
        for p in sorted(self._states):
            flushed += self._states[p].flush(math.inf)
        out = self._emit(flushed)
        self.outputs += len(out.records)
        return out

    def stats(self) -> dict[str, int]:
        return {
            "processed": self.processed,
            "outputs": self.outputs,
            "late_events": self.late_events,
            "expected_windows": len(self._expected),
        }


def _child_main(conn, defn: PipelineDefinition) -> None:
    proc = BatchProcessor(defn)
    while True:
        op, *args = conn.recv()
        if op == "process":
            conn.send(proc.process(*args))
        elif op == "tick":
            conn.send(proc.tick(*args))
        elif op == "flush":
            conn.send(proc.flush_all())
        elif op == "stats":
            conn.send(proc.stats())
        elif op == "stop":
            conn.close()
            return


class RemoteProcessor:
    """``BatchProcessor`` living in a child process, driven over a pipe."""

    def __init__(self, defn: PipelineDefinition):
        ctx = multiprocessing.get_context("spawn")
        self._conn, child = ctx.Pipe()
        self._proc = ctx.Process(target=_child_main, args=(child, defn), daemon=True)
        self._proc.start()
        child.close()

    def _call(self, *msg):
        self._conn.send(msg)
        return self._conn.recv()

    def process(self, records, ingest_ms, partition=0):
        return self._call("process", records, ingest_ms, partition)

    def tick(self, now):
        return self._call("tick", now)

    def flush_all(self):
        return self._call("flush")

    def stats(self):
        return self._call("stats")

    def close(self) -> None:
        try:
            self._conn.send(("stop",))
        except (BrokenPipeError, OSError):
            pass
        self._proc.join(timeout=5)
        if self._proc.is_alive():
            self._proc.kill()


@dataclass
class EngineStats:
    per_worker_processed: list[int] = field(default_factory=list)
    per_worker_outputs: list[int] = field(default_factory=list)
    late_events: int = 0
    expected_window_results: int = 0

    @property
    def processed(self) -> int:
        return sum(self.per_worker_processed)

    @property
    def outputs(self) -> int:
        return sum(self.per_worker_outputs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_worker_processed": self.per_worker_processed,
            "per_worker_outputs": self.per_worker_outputs,
            "processed": self.processed,
            "outputs": self.outputs,
            "late_events": self.late_events,
            "expected_window_results": self.expected_window_results,
        }


class StreamEngine:
    """Runs a pipeline over ``in_topic`` until stopped or the input closes."""

    def __init__(self, defn: PipelineDefinition, broker: Broker, in_topic: str, out_topic: str,
                 metrics=None, group: str = ENGINE_GROUP, debug_confinement: bool = False):
        self.defn = defn
        self.broker = broker
        self.in_topic = in_topic
        self.out_topic = out_topic
        self.metrics = metrics
        self.group = group
        self._in = broker.topic(in_topic)
        self._out_partitions = broker.topic(out_topic).partition_count
        defn.check(self._in.partition_count)
        self.assignment = [
            [p for p in range(self._in.partition_count) if p % defn.parallelism == i]
            for i in range(defn.parallelism)
        ]
        self._owners: dict | None = {} if debug_confinement and defn.executor == "thread" else None
        self._stop = threading.Event()
        self._drain = True
        self._threads: list[threading.Thread] = []
        self._worker_stats: list[dict[str, int]] = [{} for _ in range(defn.parallelism)]
        self.errors: list[BaseException] = []
        broker.register_group(group, in_topic)

    def start(self) -> None:
        processors = []
        try:
            for i in range(self.defn.parallelism):
                if self.defn.executor == "process":
                    processors.append(RemoteProcessor(self.defn))
                else:
                    check = (self._owners, i) if self._owners is not None else None
                    processors.append(BatchProcessor(self.defn, check))
        except Exception:
            for p in processors:
                if isinstance(p, RemoteProcessor):
                    p.close()
            raise
        for i, proc in enumerate(processors):
            for p in self.assignment[i]:
                self.broker.assign(self.group, self.in_topic, p, owner=i)
            t = threading.Thread(target=self._run_worker, args=(i, proc), name=f"engine-worker-{i}", daemon=True)
            self._threads.append(t)
        for t in self._threads:
            t.start()

    def _produce(self, out: ProcessOutput, partition: int) -> None:
        if not out.records:
            return
        if out.keys is not None:
            self.broker.produce_batch(self.out_topic, out.records, keys=out.keys)
        else:
            self.broker.produce_batch(self.out_topic, out.records, partition=partition % self._out_partitions)

    def _record(self, n_in: int, nbytes: int, out: ProcessOutput, ingest_ms: float, egress_ms: float) -> None:
        m = self.metrics
        if m is None:
            return
        m.record_batch("processor", n_in, nbytes)
        if out.ingest_refs is None:
            m.record_latency("processing", (egress_ms - ingest_ms) * 1000.0, n_in)
        else:
            for ref in out.ingest_refs:
                m.record_latency("processing", (egress_ms - ref) * 1000.0)

    def _run_worker(self, i: int, proc) -> None:
        broker, group, topic = self.broker, self.group, self.in_topic
        partitions = self.assignment[i]
        max_batch = self.defn.max_batch
        try:
            while True:
                got = 0
                for p in partitions:
                    batch = broker.consume(group, topic, p, max_batch, owner=i)
                    n = len(batch)
                    if not n:
                        continue
                    got += n
                    ingest = now_ms()
                    out = proc.process(batch.records, ingest, p)
                    egress = now_ms()
                    self._record(n, sum(map(len, batch.records)), out, ingest, egress)
                    self._produce(out, p)
                    broker.commit(group, topic, p, batch.last_offset)
                if self._stop.is_set() and (not self._drain or got == 0):
                    break
                if got == 0:
                    if self._in.closed:
                        break
                    now = now_ms()
                    out = proc.tick(now)
                    if out.records:
                        self._record(0, 0, out, now, now_ms())
                        self._produce(out, partitions[0])
                    self._in.wait_for_data(IDLE_WAIT_S)
            now = now_ms()
            out = proc.flush_all()
            if out.records:
                self._record(0, 0, out, now, now_ms())
                self._produce(out, partitions[0])
            self._worker_stats[i] = proc.stats()
        except BaseException as exc:
            logger.exception("engine worker %d failed", i)
            self.errors.append(exc)
            try:
                self._worker_stats[i] = proc.stats()
            except Exception:
                pass
        finally:
            for p in partitions:
                self.broker.release(group, topic, p, i)
            if isinstance(proc, RemoteProcessor):
                proc.close()

    def stop(self, drain: bool = True) -> EngineStats:
        """Stop workers; with ``drain`` they first consume everything available."""
        self._drain = drain
        self._stop.set()
        return self.join()

    def join(self) -> EngineStats:
        for t in self._threads:
            t.join()
        return self.stats()

    def stats(self) -> EngineStats:
        ws = self._worker_stats
        return EngineStats(
            per_worker_processed=[s.get("processed", 0) for s in ws],
            per_worker_outputs=[s.get("outputs", 0) for s in ws],
            late_events=sum(s.get("late_events", 0) for s in ws),
            expected_window_results=sum(s.get("expected_windows", 0) for s in ws),
        )


def run_pipeline(defn: PipelineDefinition, broker: Broker, in_topic: str, out_topic: str,
                 metrics=None, debug_confinement: bool = False) -> EngineStats:
    """Process ``in_topic`` until it is closed and fully consumed."""
    engine = StreamEngine(defn, broker, in_topic, out_topic, metrics, debug_confinement=debug_confinement)
    engine.start()
    stats = engine.join()
    if engine.errors:
        raise engine.errors[0]
    return stats
