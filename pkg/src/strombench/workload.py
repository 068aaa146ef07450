"""Synthetic sensor-event workload: planning, schedules, and paced emission."""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from .events import BatchEncoder, SensorEvent

logger = logging.getLogger(__name__)

DEFAULT_INSTANCE_CAP_EPS = 500_000
ACTIVE_PHASE_MS = 100
MAX_SEND_BATCH = 8192


class InvalidRate(ValueError):
    pass


class SinkClosed(RuntimeError):
    """The sink stopped accepting events; ``report`` holds partial stats."""

    def __init__(self, message: str = "sink closed", report: "GeneratorReport | None" = None):
        super().__init__(message)
        self.report = report


class Sink(Protocol):
    def send(self, records: list[bytes], keys: Sequence[int]) -> float:
        """Deliver records; return seconds spent blocked on backpressure."""
        ...


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class RandomParams:
    min_pause_ms: int = 100
    max_pause_ms: int = 1000
    min_freq_eps: float = 1000
    max_freq_eps: float = 10_000


@dataclass(frozen=True)
class BurstParams:
    interval_ms: int = 1000
    burst_freq_eps: float = 10_000


@dataclass(frozen=True)
class WorkloadSpec:
    pattern: str = "constant"
    total_rate_eps: int = 1000
    per_instance_cap_eps: int = DEFAULT_INSTANCE_CAP_EPS
    num_sensors: int = 100
    random: RandomParams = field(default_factory=RandomParams)
    burst: BurstParams = field(default_factory=BurstParams)
    temp_min_c: float = 0.0
    temp_max_c: float = 100.0
    seed: int = 0

    @classmethod
    def from_config(cls, wl: dict) -> "WorkloadSpec":
        return cls(
            pattern=wl["pattern"],
            total_rate_eps=wl["total_rate_eps"] or 0,
            per_instance_cap_eps=wl["per_instance_cap_eps"],
            num_sensors=wl["num_sensors"],
            random=RandomParams(**wl["random"]),
            burst=BurstParams(**wl["burst"]),
            temp_min_c=float(wl["temp_min_c"]),
            temp_max_c=float(wl["temp_max_c"]),
            seed=wl["seed"],
        )

    @property
    def peak_rate_eps(self) -> float:
        """Aggregate rate the generators must be able to sustain."""
        if self.pattern == "random":
            return self.random.max_freq_eps
        if self.pattern == "burst":
            return self.burst.burst_freq_eps
        return self.total_rate_eps

    def scaled(self, share: float, rate_eps: int) -> "WorkloadSpec":
        """Spec for one generator instance carrying ``share`` of the load."""
        return replace(
            self,
            total_rate_eps=rate_eps,
            random=replace(
                self.random,
                min_freq_eps=self.random.min_freq_eps * share,
                max_freq_eps=self.random.max_freq_eps * share,
            ),
            burst=replace(self.burst, burst_freq_eps=self.burst.burst_freq_eps * share),
        )


@dataclass(frozen=True)
class GeneratorPlan:
    instance_count: int
    instance_rates: tuple[int, ...]
    seed_base: int = 0

    @property
    def per_instance_rate_eps(self) -> int:
        return self.instance_rates[0]

    @property
    def total_rate_eps(self) -> int:
        return sum(self.instance_rates)


def plan_generators(total_rate_eps: int, per_instance_cap_eps: int = DEFAULT_INSTANCE_CAP_EPS,
                    seed_base: int = 0) -> GeneratorPlan:
    """Split ``total_rate_eps`` over the fewest instances that respect the cap.

    >>> plan_generators(1_200_000, 500_000).instance_rates
    (400000, 400000, 400000)
    """
    if total_rate_eps < 1:
        raise InvalidRate(f"total rate must be >= 1 event/s, got {total_rate_eps}")
    if per_instance_cap_eps < 1:
        raise InvalidRate(f"per-instance cap must be >= 1 event/s, got {per_instance_cap_eps}")
    total = int(math.ceil(total_rate_eps))
    n = -(-total // per_instance_cap_eps)
    base, rem = divmod(total, n)
    rates = tuple(base + (1 if i < rem else 0) for i in range(n))
    return GeneratorPlan(instance_count=n, instance_rates=rates, seed_base=seed_base)


def plan_for(spec: WorkloadSpec) -> GeneratorPlan:
    return plan_generators(int(math.ceil(spec.peak_rate_eps)), spec.per_instance_cap_eps, spec.seed)


def instance_specs(plan: GeneratorPlan, spec: WorkloadSpec) -> list[WorkloadSpec]:
    total = plan.total_rate_eps
    return [spec.scaled(rate / total, rate) for rate in plan.instance_rates]


def _phase_counts(freq_eps: float, length_ms: int) -> Iterator[tuple[int, int]]:
    # Deficit carry: tick j releases floor((j+1)f/1000) - floor(jf/1000).
    prev = 0
    for j in range(length_ms):
        cum = int((j + 1) * freq_eps // 1000)
        if cum > prev:
            yield j, cum - prev
        prev = cum


def _constant_counts(rate_eps: int) -> Iterator[tuple[int, int]]:
    k = 0
    prev = 0
    while True:
        cum = (k + 1) * rate_eps // 1000
        if cum > prev:
            yield k, cum - prev
        prev = cum
        k += 1


def _random_counts(rng: np.random.Generator, active_ms: int, pause: tuple[int, int],
                   freq: tuple[float, float]) -> Iterator[tuple[int, int]]:
    start = 0
    while True:
        f = rng.uniform(freq[0], freq[1])
        silent = True
        for j, c in _phase_counts(f, active_ms):
            silent = False
            yield start + j, c
        if silent:
            # Keeps consumers of the iterator advancing through empty phases.
            yield start, 0
        start += active_ms
        start += int(rng.integers(pause[0], pause[1], endpoint=True))


def tick_counts(spec: WorkloadSpec, rng_seed: int) -> Iterator[tuple[int, int]]:
    """Endless ``(tick_ms, count)`` pairs in tick order.

    Ticks with no events are omitted, except one ``(tick, 0)`` marker per
    phase that would otherwise be silent.
    """
    if spec.pattern == "constant":
        return _constant_counts(int(spec.total_rate_eps))
    rng = np.random.default_rng(rng_seed)
    if spec.pattern == "random":
        r = spec.random
        return _random_counts(rng, ACTIVE_PHASE_MS, (r.min_pause_ms, r.max_pause_ms),
                              (r.min_freq_eps, r.max_freq_eps))
    if spec.pattern == "burst":
        # A burst is a random phase with collapsed bounds: fixed pause, fixed frequency.
        b = spec.burst
        active = min(ACTIVE_PHASE_MS, b.interval_ms)
        gap = b.interval_ms - active
        return _random_counts(rng, active, (gap, gap), (b.burst_freq_eps, b.burst_freq_eps))
    raise ValueError(f"unknown pattern {spec.pattern!r}")


def emission_schedule(spec: WorkloadSpec, rng_seed: int, duration_ms: int | None = None) -> Iterator[int]:
    """Emission instants as ms offsets; events released in one tick share its instant."""
    for tick, count in tick_counts(spec, rng_seed):
        if duration_ms is not None and tick >= duration_ms:
            return
        for _ in range(count):
            yield tick


def generate_event(rng: np.random.Generator, num_sensors: int,
                   clock: Callable[[], int] = wall_clock_ms,
                   temp_min_c: float = 0.0, temp_max_c: float = 100.0) -> SensorEvent:
    lo, hi = round(temp_min_c * 10), round(temp_max_c * 10)
    return SensorEvent(
        created_at=clock(),
        sensor_id=int(rng.integers(0, num_sensors)),
        temperature_c=int(rng.integers(lo, hi, endpoint=True)) / 10,
    )


@dataclass
class GeneratorStats:
    events_emitted: int = 0
    bytes_emitted: int = 0
    wall_time_ms: float = 0.0
    backpressure_time_ms: float = 0.0

    @property
    def achieved_rate_eps(self) -> float:
        if self.wall_time_ms <= 0:
            return 0.0
        return self.events_emitted / (self.wall_time_ms / 1000)

    def to_dict(self) -> dict:
        return {
            "events_emitted": self.events_emitted,
            "bytes_emitted": self.bytes_emitted,
            "wall_time_ms": self.wall_time_ms,
            "achieved_rate_eps": self.achieved_rate_eps,
            "backpressure_time_ms": self.backpressure_time_ms,
        }


@dataclass
class GeneratorReport:
    instances: list[GeneratorStats]

    @property
    def aggregate(self) -> GeneratorStats:
        return GeneratorStats(
            events_emitted=sum(s.events_emitted for s in self.instances),
            bytes_emitted=sum(s.bytes_emitted for s in self.instances),
            wall_time_ms=max((s.wall_time_ms for s in self.instances), default=0.0),
            backpressure_time_ms=sum(s.backpressure_time_ms for s in self.instances),
        )


class _Instance:
    def __init__(self, index: int, spec: WorkloadSpec, seed: int, sink: Sink, event_size: int,
                 metrics, stop: threading.Event, clock: Callable[[], int]):
        self.index = index
        self.spec = spec
        self.seed = seed
        self.sink = sink
        self.encoder = BatchEncoder(event_size)
        self.metrics = metrics
        self.stop = stop
        self.clock = clock
        self.stats = GeneratorStats()
        self.error: BaseException | None = None
        self._rng = np.random.default_rng(seed)
        self._lo = round(spec.temp_min_c * 10)
        self._hi = round(spec.temp_max_c * 10)

    def _emit(self, n: int) -> None:
        while n > 0:
            k = min(n, MAX_SEND_BATCH)
            ids = self._rng.integers(0, self.spec.num_sensors, k)
            tenths = self._rng.integers(self._lo, self._hi, k, endpoint=True)
            records = self.encoder.encode(self.clock(), ids, tenths)
            nbytes = k * self.encoder.target_size
            if self.metrics is not None:
                self.metrics.record_batch("generator", k, nbytes)
            blocked = self.sink.send(records, ids)
            self.stats.events_emitted += k
            self.stats.bytes_emitted += nbytes
            self.stats.backpressure_time_ms += blocked * 1000
            n -= k

    def run(self, duration_ms: int) -> None:
        sched = tick_counts(self.spec, self.seed)
        tick, count = next(sched)
        start = time.perf_counter()
        try:
            while True:
                elapsed = (time.perf_counter() - start) * 1000
                horizon = min(elapsed, duration_ms)
                due = 0
                while tick < duration_ms and tick <= horizon:
                    due += count
                    tick, count = next(sched)
                if due:
                    self._emit(due)
                if horizon >= duration_ms or self.stop.is_set():
                    break
                wait_ms = max(tick - (time.perf_counter() - start) * 1000, 0.0)
                if wait_ms > 0:
                    self.stop.wait(min(wait_ms, 50.0) / 1000)
        except Exception as exc:  # surfaced by run_generator
            self.error = exc
            self.stop.set()
        finally:
            self.stats.wall_time_ms = (time.perf_counter() - start) * 1000


def run_generator(plan: GeneratorPlan, spec: WorkloadSpec, sink: Sink, duration_s: float,
                  event_size: int, metrics=None, stop: threading.Event | None = None,
                  clock: Callable[[], int] = wall_clock_ms) -> GeneratorReport:
    """Run every planned instance concurrently for ``duration_s`` seconds.

    Each instance paces itself on 1 ms ticks and catches up on any deficit,
    so the emitted total equals the scheduled total even when a tick is late.
    Raises ``SinkClosed`` carrying partial stats if the sink shuts.
    """
    stop = stop or threading.Event()
    duration_ms = int(round(duration_s * 1000))
    specs = instance_specs(plan, spec)
    instances = [
        _Instance(i, s, plan.seed_base + i, sink, event_size, metrics, stop, clock)
        for i, s in enumerate(specs)
    ]
    if duration_ms <= 0:
        return GeneratorReport([inst.stats for inst in instances])

    threads = [
        threading.Thread(target=inst.run, args=(duration_ms,), name=f"generator-{inst.index}", daemon=True)
        for inst in instances
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    report = GeneratorReport([inst.stats for inst in instances])
    errors = [inst.error for inst in instances if inst.error is not None]
    closed = [e for e in errors if isinstance(e, SinkClosed)]
    if closed:
        raise SinkClosed(str(closed[0]), report)
    if errors:
        raise errors[0]
    return report
