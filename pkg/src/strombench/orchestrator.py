"""Run orchestration: environment detection, SLURM scripts, run lifecycle."""

from __future__ import annotations

import logging
import math
import os
import subprocess
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, TextIO

import psutil

from .broker import Broker, TopicDrainer, TopicSink
from .config import (
    RunConfig,
    RunManifest,
    dump_resolved,
    expand_experiment_matrix,
    host_descriptor,
    load_config,
    validate_config,
)
from .engine import PipelineDefinition, StreamEngine
from .metrics import LATENCY_KINDS, TAP_LATENCY, MetricsRegistry, ProcessProbe, Snapshotter
from .workload import SinkClosed, WorkloadSpec, plan_for, run_generator, wall_clock_ms

logger = logging.getLogger("strombench")

MODES = ("local", "slurm_interactive", "slurm_batch")
DEPENDENCY_PLACEHOLDER = "__PREV_JOB_ID__"
INGEST_TOPIC = "ingest"
EGEST_TOPIC = "egest"
EGRESS_GROUP = "egress"

GENERATOR_MEM_GB = 2
BROKER_MEM_GB = 5
CONTROL_CPUS = 2
WALLTIME_FACTOR = 1.5
WALLTIME_SLACK_S = 600
LOG_TAIL_LINES = 20


class OrchestratorError(Exception):
    pass


class ResourceOverCap(OrchestratorError):
    def __init__(self, excess: list[tuple[str, float, float]]):
        self.excess = excess
        super().__init__("; ".join(f"{k}: need {need:g}, cap {cap:g}" for k, need, cap in excess))


class InsufficientAllocation(OrchestratorError):
    def __init__(self, shortfall: list[tuple[str, float, float]]):
        self.shortfall = shortfall
        super().__init__(
            "insufficient allocation: "
            + "; ".join(f"{k}: need {need:g}, allocated {have:g}" for k, need, have in shortfall)
        )


class ComponentStartupFailure(OrchestratorError):
    def __init__(self, component: str, cause: BaseException, log_tail: list[str]):
        self.component = component
        self.cause = cause
        self.log_tail = log_tail
        super().__init__(f"{component} failed to start: {cause}")


class DrainTimeout(OrchestratorError):
    def __init__(self, remaining_lag: int, manifest: RunManifest):
        self.remaining_lag = remaining_lag
        self.manifest = manifest
        super().__init__(f"drain timed out with {remaining_lag} records outstanding")


@dataclass(frozen=True)
class ExecutionEnvironment:
    mode: str
    cpus: int
    mem_gb: float
    nodes: int


def _int_env(env: Mapping[str, str], key: str) -> int | None:
    raw = env.get(key, "")
    # SLURM writes values such as "16(x2)" for heterogeneous allocations.
    digits = raw.split("(", 1)[0].strip()
    return int(digits) if digits.isdigit() else None


def detect_environment(env: Mapping[str, str] | None = None, isatty: bool | None = None) -> ExecutionEnvironment:
    env = os.environ if env is None else env
    if isatty is None:
        isatty = sys.stdin.isatty()
    if env.get("SLURM_JOB_ID"):
        mode = "slurm_interactive" if isatty else "slurm_batch"
    else:
        mode = "local"
    cpus = _int_env(env, "SLURM_CPUS_PER_TASK") or os.cpu_count() or 1
    mem_mb = _int_env(env, "SLURM_MEM_PER_NODE")
    mem_gb = mem_mb / 1024 if mem_mb is not None else psutil.virtual_memory().total / 2**30
    nodes = _int_env(env, "SLURM_JOB_NUM_NODES") or 1
    return ExecutionEnvironment(mode=mode, cpus=cpus, mem_gb=mem_gb, nodes=nodes)


@dataclass(frozen=True)
class ResourceRequest:
    nodes: int
    cpus_per_task: int
    mem_gb: int
    walltime_s: int

    @property
    def walltime(self) -> str:
        h, rest = divmod(self.walltime_s, 3600)
        m, s = divmod(rest, 60)
        return f"{h:02d}:{m:02d}:{s:02d}"


def generator_count(config: dict[str, Any]) -> int:
    return plan_for(WorkloadSpec.from_config(config["workload"])).instance_count


def compute_resources(run: RunConfig) -> ResourceRequest:
    """Deterministic resource request for one run, checked against the caps.

    The minimum is one CPU per generator and engine worker plus two for the
    broker and control loop, and 2 GB per generator plus 5 GB for the broker
    plus the engine budget. Explicit requests in the config raise it further.
    """
    cfg = run.config
    res = cfg["resources"]
    gens = generator_count(cfg)
    cpus = gens + cfg["pipeline"]["parallelism"] + CONTROL_CPUS
    mem = gens * GENERATOR_MEM_GB + BROKER_MEM_GB + res["engine_mem_gb"]
    req = ResourceRequest(
        nodes=res["nodes"],
        cpus_per_task=max(cpus, res["cpus_per_task"] or 0),
        mem_gb=max(mem, res["mem_gb"] or 0),
        walltime_s=math.ceil(cfg["duration_s"] * cfg["repetitions"] * WALLTIME_FACTOR) + WALLTIME_SLACK_S,
    )
    excess = [
        (name, need, cap)
        for name, need, cap in (
            ("cpus", req.cpus_per_task, res["max_cpus"]),
            ("mem_gb", req.mem_gb, res["max_mem_gb"]),
        )
        if need > cap
    ]
    if excess:
        raise ResourceOverCap(excess)
    return req


def run_dir_for(run: RunConfig) -> Path:
    return Path(run.config["output_dir"]) / run.experiment_name / run.run_id


def emit_sbatch(run: RunConfig, resources: ResourceRequest, config_path: str | Path,
                depends_on_previous: bool = False) -> str:
    """Batch script for one run. A pure function of its arguments."""
    lines = [
        "#!/bin/bash",
        f"#SBATCH --job-name={run.experiment_name}-{run.run_id}",
        f"#SBATCH --nodes={resources.nodes}",
        "#SBATCH --ntasks=1",
        f"#SBATCH --cpus-per-task={resources.cpus_per_task}",
        f"#SBATCH --mem={resources.mem_gb}G",
        f"#SBATCH --time={resources.walltime}",
        f"#SBATCH --output={run_dir_for(run) / 'logs' / 'slurm-%j.out'}",
    ]
    if depends_on_previous:
        lines.append(f"#SBATCH --dependency=afterok:{DEPENDENCY_PLACEHOLDER}")
    lines += [
        "",
        "set -euo pipefail",
        f"srun strombench run --config {config_path} --run-id {run.run_id} --mode slurm-interactive",
        "",
    ]
    return "\n".join(lines)


def write_sbatch_scripts(runs: list[RunConfig], config_path: str | Path, out_dir: str | Path) -> list[Path]:
    """One script per run, each after the first chained on its predecessor."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, run in enumerate(runs):
        text = emit_sbatch(run, compute_resources(run), config_path, depends_on_previous=i > 0)
        path = out / f"{i + 1:03d}_{run.run_id}.sbatch"
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths


def submit_chain(scripts: list[Path], sbatch: str = "sbatch") -> list[str]:
    """Submit scripts in order, filling each dependency with the prior job id."""
    job_ids: list[str] = []
    for path in scripts:
        text = path.read_text(encoding="utf-8")
        if job_ids:
            text = text.replace(DEPENDENCY_PLACEHOLDER, job_ids[-1])
        proc = subprocess.run([sbatch, "--parsable"], input=text, capture_output=True, text=True, check=True)
        job_ids.append(proc.stdout.strip().split(";", 1)[0])
    return job_ids


def interactive_guard(run: RunConfig, env: ExecutionEnvironment) -> None:
    if env.mode != "slurm_interactive":
        return
    req = compute_resources(run)
    shortfall = [
        (name, need, have)
        for name, need, have in (
            ("cpus", req.cpus_per_task, env.cpus),
            ("mem_gb", req.mem_gb, env.mem_gb),
            ("nodes", req.nodes, env.nodes),
        )
        if need > have
    ]
    if shortfall:
        raise InsufficientAllocation(shortfall)


@dataclass
class RunOutcome:
    run_id: str
    status: str
    run_dir: Path
    manifest: RunManifest
    exit_status: int
    detail: str = ""


class _TailHandler(logging.Handler):
    def __init__(self, n: int):
        super().__init__()
        self.lines: deque[str] = deque(maxlen=n)

    def emit(self, record: logging.LogRecord) -> None:
        self.lines.append(self.format(record))


def _latency_summary(registry: MetricsRegistry) -> dict[str, Any]:
    out = {}
    for kind in LATENCY_KINDS:
        h = registry.histogram(kind)
        if h.total:
            out[kind] = {
                "count": h.total,
                "mean_us": h.mean,
                "p50_us": h.percentile(0.50),
                "p95_us": h.percentile(0.95),
                "p99_us": h.percentile(0.99),
            }
        else:
            out[kind] = {"count": 0}
    return out


def execute_run(run: RunConfig, probe=None) -> RunOutcome:
    """Run one configuration end to end and leave its directory behind.

    Components start in a fixed order: broker topics, engine (which registers
    its consumer group), egress drainer, snapshotter, generators. Shutdown
    drains the engine until its lag reaches zero or the drain timeout passes.
    """
    cfg = run.config
    run_dir = run_dir_for(run)
    metrics_dir = run_dir / "metrics"
    logs_dir = run_dir / "logs"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    logs_dir.mkdir(parents=True, exist_ok=True)
    dump_resolved(run, run_dir / "config.resolved.yaml")

    manifest = RunManifest(
        experiment_name=run.experiment_name,
        run_id=run.run_id,
        assignment=run.assignment,
        config_hash=run.content_hash(),
        host=host_descriptor(),
        started_at_ms=wall_clock_ms(),
    )
    manifest_path = run_dir / "manifest.json"
    manifest.write(manifest_path)

    fmt = logging.Formatter("%(asctime)s %(levelname)s %(threadName)s %(message)s")
    file_handler = logging.FileHandler(logs_dir / "run.log", encoding="utf-8")
    file_handler.setFormatter(fmt)
    tail = _TailHandler(LOG_TAIL_LINES)
    tail.setFormatter(fmt)
    prev_level = logger.level
    logger.addHandler(file_handler)
    logger.addHandler(tail)
    logger.setLevel(logging.INFO)

    started: list[str] = []
    engine: StreamEngine | None = None
    drainer: TopicDrainer | None = None
    snap: Snapshotter | None = None
    details: dict[str, Any] = manifest.details

    def startup(component: str, fn):
        try:
            value = fn()
        except Exception as exc:
            logger.exception("%s failed to start", component)
            details["startup_order"] = started
            details["failed_component"] = component
            details["error"] = f"{type(exc).__name__}: {exc}"
            details["exit_status"] = 2
            manifest.status = "failed"
            manifest.ended_at_ms = wall_clock_ms()
            manifest.write(manifest_path)
            raise ComponentStartupFailure(component, exc, list(tail.lines)) from exc
        started.append(component)
        logger.info("started %s", component)
        return value

    try:
        logger.info("run %s: config hash %s", run.run_id, manifest.config_hash)
        registry = MetricsRegistry(cfg["metrics"]["latency_sample_every"])
        broker = Broker()

        def start_broker():
            br = cfg["broker"]
            ingest = broker.create_topic(INGEST_TOPIC, br["partitions"], br["partition_capacity"])
            egest = broker.create_topic(EGEST_TOPIC, br["partitions"], br["partition_capacity"])
            ingest.add_observer(registry.broker_observer("broker_in"))
            egest.add_observer(registry.broker_observer("broker_out"))

        startup("broker", start_broker)

        def start_engine():
            eng = StreamEngine(PipelineDefinition.from_config(cfg["pipeline"]), broker,
                               INGEST_TOPIC, EGEST_TOPIC, registry)
            eng.start()
            return eng

        engine = startup("engine", start_engine)
        drainer = startup("egress", lambda: TopicDrainer(broker, EGEST_TOPIC, EGRESS_GROUP).start())

        def start_snapshotter():
            s = Snapshotter(registry, metrics_dir, cfg["metrics"]["interval_ms"],
                            probe if probe is not None else ProcessProbe())
            s.start()
            return s

        snap = startup("snapshotter", start_snapshotter)

        spec = WorkloadSpec.from_config(cfg["workload"])
        plan = startup("generators", lambda: plan_for(spec))
        details["generator_plan"] = {
            "instance_count": plan.instance_count,
            "instance_rates_eps": list(plan.instance_rates),
        }
        details["startup_order"] = started
        manifest.write(manifest_path)

        status = "ok"
        try:
            report = run_generator(plan, spec, TopicSink(broker, INGEST_TOPIC), cfg["duration_s"],
                                   cfg["event_size_bytes"], metrics=registry)
        except SinkClosed as exc:
            report = exc.report
            status = "failed"
            details["error"] = f"SinkClosed: {exc}"
        except Exception as exc:
            logger.exception("generator failed")
            report = None
            status = "failed"
            details["error"] = f"{type(exc).__name__}: {exc}"
        if report is not None:
            details["generator"] = report.aggregate.to_dict()
            details["generator_instances"] = [s.to_dict() for s in report.instances]
        logger.info("generators finished")

        deadline = time.monotonic() + cfg["drain_timeout_s"]
        lag = sum(broker.lag(engine.group, INGEST_TOPIC))
        while lag > 0 and time.monotonic() < deadline and not engine.errors:
            time.sleep(0.01)
            lag = sum(broker.lag(engine.group, INGEST_TOPIC))
        timed_out = lag > 0
        broker.close_topic(INGEST_TOPIC)
        estats = engine.stop(drain=not timed_out)
        drainer.stop()
        snap.stop()
        snap = None
        logger.info("engine stopped; remaining lag %d", lag)

        if engine.errors:
            status = "failed"
            details.setdefault("error", f"{type(engine.errors[0]).__name__}: {engine.errors[0]}")
        elif timed_out and status == "ok":
            status = "degraded"
        details["engine"] = estats.to_dict()
        details["expected_window_results"] = estats.expected_window_results
        details["remaining_lag"] = lag
        details["taps"] = {tap: dict(zip(("events", "bytes"), registry.totals(tap)))
                           for tap in ("generator", *TAP_LATENCY)}
        details["negative_latency_flags"] = registry.negative_flags()
        details["latency"] = _latency_summary(registry)
        details["exit_status"] = 0 if status == "ok" else 2
        manifest.status = status
        manifest.ended_at_ms = wall_clock_ms()
        manifest.write(manifest_path)
        if status == "degraded":
            raise DrainTimeout(lag, manifest)
        return RunOutcome(run.run_id, status, run_dir, manifest, details["exit_status"],
                          details.get("error", ""))
    finally:
        if engine is not None and engine._threads and any(t.is_alive() for t in engine._threads):
            engine.stop(drain=False)
        if snap is not None:
            snap.stop()
        logger.removeHandler(file_handler)
        logger.removeHandler(tail)
        logger.setLevel(prev_level)
        file_handler.close()


MODE_ALIASES = {
    "auto": None,
    "local": "local",
    "slurm-interactive": "slurm_interactive",
    "slurm-batch": "slurm_batch",
}


@dataclass
class ExperimentSummary:
    rows: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(status in ("ok", "script", "submitted") for _, status, _ in self.rows)


def format_table(rows: list[tuple[str, str, str]]) -> str:
    header = ("run_id", "status", "detail")
    all_rows = [header, *rows]
    w0 = max(len(r[0]) for r in all_rows)
    w1 = max(len(r[1]) for r in all_rows)
    return "\n".join(f"{a:<{w0}}  {b:<{w1}}  {c}".rstrip() for a, b, c in all_rows)


def run_experiment(config_path: str | Path, mode: str = "auto", dry_run: bool = False,
                   run_id: str | None = None, env: ExecutionEnvironment | None = None,
                   stream: TextIO | None = None, sbatch: str = "sbatch") -> ExperimentSummary:
    """Expand the matrix in ``config_path`` and execute or submit every run."""
    stream = stream or sys.stdout
    cfg = validate_config(load_config(config_path))
    runs = expand_experiment_matrix(cfg)
    if run_id is not None:
        runs = [r for r in runs if r.run_id == run_id]
        if not runs:
            raise OrchestratorError(f"no run with id {run_id!r} in the matrix")

    env = env or detect_environment()
    forced = MODE_ALIASES[mode]
    if forced is not None:
        env = ExecutionEnvironment(forced, env.cpus, env.mem_gb, env.nodes)

    summary = ExperimentSummary()
    if env.mode == "slurm_batch":
        script_dir = Path(cfg["output_dir"]) / cfg["experiment_name"] / "sbatch"
        scripts = write_sbatch_scripts(runs, Path(config_path).resolve(), script_dir)
        if dry_run:
            summary.rows = [(r.run_id, "script", str(p)) for r, p in zip(runs, scripts)]
        else:
            job_ids = submit_chain(scripts, sbatch)
            summary.rows = [(r.run_id, "submitted", f"job {j}") for r, j in zip(runs, job_ids)]
    else:
        for run in runs:
            interactive_guard(run, env)
        for run in runs:
            try:
                outcome = execute_run(run)
                summary.rows.append((run.run_id, outcome.status, outcome.detail))
            except DrainTimeout as exc:
                summary.rows.append((run.run_id, "degraded", str(exc)))
            except ComponentStartupFailure as exc:
                summary.rows.append((run.run_id, "failed", str(exc)))
            except Exception as exc:
                logger.exception("run %s failed", run.run_id)
                summary.rows.append((run.run_id, "failed", f"{type(exc).__name__}: {exc}"))
    print(format_table(summary.rows), file=stream)
    return summary
