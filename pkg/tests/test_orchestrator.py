import io
import json
import os
import stat
from pathlib import Path

import pytest
import yaml

from strombench import orchestrator
from strombench.config import RunManifest, config_hash, expand_experiment_matrix, load_config, validate_config
from strombench.orchestrator import (
    DEPENDENCY_PLACEHOLDER,
    ComponentStartupFailure,
    DrainTimeout,
    ExecutionEnvironment,
    InsufficientAllocation,
    ResourceOverCap,
    compute_resources,
    detect_environment,
    emit_sbatch,
    execute_run,
    interactive_guard,
    run_experiment,
    submit_chain,
    write_sbatch_scripts,
)

from conftest import make_config

GOLDEN = Path(__file__).parent / "golden"


def one_run(tmp_path, **kw):
    return expand_experiment_matrix(make_config(tmp_path, **kw))[0]


def test_detect_environment_modes():
    assert detect_environment({}, isatty=True).mode == "local"
    assert detect_environment({"SLURM_JOB_ID": "7"}, isatty=False).mode == "slurm_batch"
    env = detect_environment({"SLURM_JOB_ID": "7", "SLURM_CPUS_PER_TASK": "16",
                              "SLURM_MEM_PER_NODE": "204800", "SLURM_JOB_NUM_NODES": "2"}, isatty=True)
    assert env == ExecutionEnvironment("slurm_interactive", 16, 200.0, 2)


def test_local_resources_from_host():
    env = detect_environment({}, isatty=False)
    assert env.cpus == os.cpu_count()
    assert env.mem_gb > 0


def test_compute_resources_formula(tmp_path):
    run = one_run(tmp_path, workload={"total_rate_eps": 1_200_000}, broker={"partitions": 4},
                  pipeline={"parallelism": 4}, duration_s=10, repetitions=3)
    req = compute_resources(run)
    assert req.cpus_per_task == 3 + 4 + 2
    assert req.mem_gb == 3 * 2 + 5 + 4
    assert req.walltime_s == 45 + 600
    assert req.walltime == "00:10:45"


def test_explicit_request_raises_minimum_only(tmp_path):
    run = one_run(tmp_path, resources={"cpus_per_task": 2, "mem_gb": 64})
    req = compute_resources(run)
    assert req.cpus_per_task == 1 + 1 + 2
    assert req.mem_gb == 64


def test_resource_over_cap(tmp_path):
    run = one_run(tmp_path, resources={"engine_mem_gb": 194})
    with pytest.raises(ResourceOverCap) as err:
        compute_resources(run)
    assert err.value.excess == [("mem_gb", 1 * 2 + 5 + 194, 200)]


def golden_runs():
    cfg = validate_config(load_config(GOLDEN / "scaleup.yaml"))
    return expand_experiment_matrix(cfg)


def test_sbatch_matches_golden_files():
    runs = golden_runs()
    for i, run in enumerate(runs):
        text = emit_sbatch(run, compute_resources(run), "tests/golden/scaleup.yaml", depends_on_previous=i > 0)
        assert text == (GOLDEN / f"{i + 1:03d}_{run.run_id}.sbatch").read_text()
        assert "#SBATCH --cpus-per-task=16\n" in text
        assert "#SBATCH --mem=200G\n" in text
        assert ("--dependency=afterok:" in text) == (i > 0)


def test_sbatch_is_pure():
    a = [emit_sbatch(r, compute_resources(r), "c.yaml", True) for r in golden_runs()]
    b = [emit_sbatch(r, compute_resources(r), "c.yaml", True) for r in golden_runs()]
    assert a == b


def test_submit_chain_fills_dependencies(tmp_path):
    runs = golden_runs()
    scripts = write_sbatch_scripts(runs, "c.yaml", tmp_path / "s")
    log = tmp_path / "submitted"
    fake = tmp_path / "sbatch"
    fake.write_text(
        "#!/bin/sh\n"
        f'n=$(ls {log} 2>/dev/null | wc -l)\n'
        f"mkdir -p {log}\n"
        f'cat > {log}/job$((n+100))\n'
        'echo "$((n+100));cluster"\n'
    )
    fake.chmod(fake.stat().st_mode | stat.S_IEXEC)
    ids = submit_chain(scripts, str(fake))
    assert ids == ["100", "101"]
    second = (log / "job101").read_text()
    assert "#SBATCH --dependency=afterok:100\n" in second
    assert DEPENDENCY_PLACEHOLDER not in second


def test_interactive_guard(tmp_path):
    run = one_run(tmp_path, pipeline={"parallelism": 1})  # needs 4 cpus, 11 GB
    interactive_guard(run, ExecutionEnvironment("slurm_interactive", 16, 64, 1))
    interactive_guard(run, ExecutionEnvironment("local", 1, 1, 1))
    with pytest.raises(InsufficientAllocation) as err:
        interactive_guard(run, ExecutionEnvironment("slurm_interactive", 2, 8, 1))
    assert err.value.shortfall == [("cpus", 4, 2), ("mem_gb", 11, 8)]


def test_execute_run_happy_path(tmp_path):
    run = one_run(tmp_path, duration_s=2, workload={"total_rate_eps": 5000},
                  metrics={"interval_ms": 200})
    out = execute_run(run)
    assert out.status == "ok" and out.exit_status == 0
    d = out.run_dir
    assert d == tmp_path / "results" / "t" / "base_rep1"
    assert sorted(p.name for p in (d / "metrics").glob("throughput_*.csv")) == [
        "throughput_broker_in.csv", "throughput_broker_out.csv",
        "throughput_generator.csv", "throughput_processor.csv"]
    assert len(list((d / "metrics").glob("latency_*.csv"))) == 3
    assert (d / "logs" / "run.log").stat().st_size > 0
    manifest = RunManifest.read(d / "manifest.json")
    resolved = yaml.safe_load((d / "config.resolved.yaml").read_text())
    assert manifest.config_hash == config_hash(resolved)
    assert manifest.status == "ok"
    det = manifest.details
    assert det["startup_order"] == ["broker", "engine", "egress", "snapshotter", "generators"]
    assert det["taps"]["generator"]["events"] == 10_000
    assert all(det["taps"][t]["events"] == 10_000 for t in det["taps"])
    assert det["negative_latency_flags"] == {"driver": 0, "processing": 0, "end_to_end": 0}
    assert det["latency"]["end_to_end"]["count"] == 10_000


def test_engine_startup_failure_precedes_generators(tmp_path):
    run = one_run(tmp_path)
    run.config["pipeline"]["kind"] = "bogus"
    with pytest.raises(ComponentStartupFailure) as err:
        execute_run(run)
    assert err.value.component == "engine"
    assert any("engine failed to start" in line for line in err.value.log_tail)
    m = RunManifest.read(orchestrator.run_dir_for(run) / "manifest.json")
    assert m.status == "failed"
    assert m.details["startup_order"] == ["broker"]
    assert "generator" not in m.details


def test_drain_timeout_marks_degraded(tmp_path):
    run = one_run(tmp_path, duration_s=1, drain_timeout_s=0,
                  workload={"total_rate_eps": 200_000},
                  pipeline={"kind": "memory_intensive", "parallelism": 1},
                  broker={"partitions": 1})
    with pytest.raises(DrainTimeout) as err:
        execute_run(run)
    assert err.value.manifest.status == "degraded"
    m = RunManifest.read(orchestrator.run_dir_for(run) / "manifest.json")
    assert m.status == "degraded"
    assert m.details["remaining_lag"] > 0


def write_config(tmp_path, **extra):
    raw = {"experiment_name": "exp", "duration_s": 1, "repetitions": 2,
           "output_dir": str(tmp_path / "results"),
           "workload": {"total_rate_eps": [1000, 2000]}, "metrics": {"interval_ms": 200}}
    raw.update(extra)
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def test_run_experiment_local(tmp_path):
    cfg = write_config(tmp_path)
    buf = io.StringIO()
    summary = run_experiment(cfg, mode="local", stream=buf)
    assert summary.ok
    dirs = sorted(p.name for p in (tmp_path / "results" / "exp").iterdir())
    assert dirs == ["total-rate-eps-1000_rep1", "total-rate-eps-1000_rep2",
                    "total-rate-eps-2000_rep1", "total-rate-eps-2000_rep2"]
    assert buf.getvalue().splitlines()[0].split() == ["run_id", "status", "detail"]


def test_failed_run_does_not_block_others(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, repetitions=1)
    real = orchestrator.execute_run
    calls = []

    def flaky(run, probe=None):
        calls.append(run.run_id)
        if len(calls) == 1:
            raise RuntimeError("boom")
        return real(run, probe)

    monkeypatch.setattr(orchestrator, "execute_run", flaky)
    summary = run_experiment(cfg, mode="local", stream=io.StringIO())
    assert [s for _, s, _ in summary.rows] == ["failed", "ok"]
    assert not summary.ok


def test_batch_dry_run_writes_scripts_only(tmp_path):
    cfg = write_config(tmp_path)
    summary = run_experiment(cfg, mode="slurm-batch", dry_run=True, stream=io.StringIO(),
                             sbatch=str(tmp_path / "must-not-run"))
    scripts = sorted((tmp_path / "results" / "exp" / "sbatch").glob("*.sbatch"))
    assert len(scripts) == 4
    assert [s for _, s, _ in summary.rows] == ["script"] * 4
    assert not (tmp_path / "results" / "exp" / "total-rate-eps-1000_rep1").exists()
    texts = [p.read_text() for p in scripts]
    assert sum("--dependency=afterok" in t for t in texts) == 3


def test_interactive_mode_refuses_small_allocation(tmp_path):
    cfg = write_config(tmp_path)
    env = ExecutionEnvironment("slurm_interactive", 1, 1.0, 1)
    with pytest.raises(InsufficientAllocation):
        run_experiment(cfg, mode="auto", env=env, stream=io.StringIO())


def test_run_id_filter(tmp_path):
    cfg = write_config(tmp_path)
    summary = run_experiment(cfg, mode="local", run_id="total-rate-eps-2000_rep2", stream=io.StringIO())
    assert [r for r, _, _ in summary.rows] == ["total-rate-eps-2000_rep2"]
    with pytest.raises(orchestrator.OrchestratorError):
        run_experiment(cfg, mode="local", run_id="nope", stream=io.StringIO())
