import pytest
import yaml

from strombench.config import (
    ConfigError,
    MatrixTooLarge,
    RunManifest,
    ValidationErrors,
    config_hash,
    dump_resolved,
    expand_experiment_matrix,
    load_config,
    validate_config,
)

from conftest import BASE, make_config


def errors_of(raw):
    with pytest.raises(ValidationErrors) as err:
        validate_config(raw)
    return err.value.errors


def test_defaults_filled():
    cfg = make_config()
    assert cfg["broker"]["partitions"] == 4
    assert cfg["pipeline"]["kind"] == "pass_through"
    assert cfg["event_size_bytes"] == 27
    assert cfg["resources"]["max_mem_gb"] == 200
    assert cfg["resources"]["cpus_per_task"] is None


def test_all_errors_collected():
    errs = errors_of({
        "duration_s": -1,
        "bogus": 1,
        "workload": {"total_rate_eps": 0, "pattern": "zigzag"},
        "pipeline": {"parallelism": 8, "window_len_ms": 5000, "window_slide_ms": 3000},
        "broker": {"partitions": 4, "nope": True},
        "event_size_bytes": 20,
    })
    paths = {p for p, _ in errs}
    assert {"experiment_name", "duration_s", "bogus", "workload.total_rate_eps", "workload.pattern",
            "pipeline.parallelism", "pipeline.window_slide_ms", "broker.nope", "event_size_bytes"} <= paths


def test_type_errors_and_lists():
    errs = errors_of({**BASE, "repetitions": [1, 2], "duration_s": "ten"})
    assert ("repetitions", "does not accept a list") in errs
    assert ("duration_s", "expected integer") in errs
    errs = errors_of({**BASE, "pipeline": {"parallelism": [1, True]}})
    assert ("pipeline.parallelism[1]", "expected integer") in errs


def test_event_size_must_fit_worst_case():
    errs = errors_of({**BASE, "workload": {"total_rate_eps": 10, "num_sensors": 1000, "temp_min_c": -50.0}})
    assert errs[0][0] == "event_size_bytes"
    # 13-digit ts + "999" + "-50.0" + 7 frame bytes
    assert "effective minimum is 28 B" in errs[0][1]


def test_rate_optional_for_burst():
    cfg = validate_config({**BASE, "workload": {"pattern": "burst"}})
    assert cfg["workload"]["total_rate_eps"] is None
    assert ("workload.total_rate_eps", "required") in errors_of({**BASE, "workload": {"pattern": "constant"}})


def test_expansion_order_and_ids():
    cfg = make_config(
        repetitions=2,
        workload={"total_rate_eps": [100, 200]},
        pipeline={"parallelism": [1, 2]},
    )
    runs = expand_experiment_matrix(cfg)
    assert [r.run_id for r in runs] == [
        "total-rate-eps-100_parallelism-1_rep1",
        "total-rate-eps-100_parallelism-1_rep2",
        "total-rate-eps-100_parallelism-2_rep1",
        "total-rate-eps-100_parallelism-2_rep2",
        "total-rate-eps-200_parallelism-1_rep1",
        "total-rate-eps-200_parallelism-1_rep2",
        "total-rate-eps-200_parallelism-2_rep1",
        "total-rate-eps-200_parallelism-2_rep2",
    ]
    r = runs[5]
    assert r.config["workload"]["total_rate_eps"] == 200
    assert r.config["pipeline"]["parallelism"] == 1
    assert r.rep == 2 and r.config["rep"] == 2
    # Repetitions share every parameter but the rep index.
    strip = lambda c: {k: v for k, v in c.items() if k not in ("rep", "run_id")}
    assert strip(runs[0].config) == strip(runs[1].config)


def test_base_slug_and_workload_list():
    assert [r.run_id for r in expand_experiment_matrix(make_config())] == ["base_rep1"]
    cfg = make_config(workload=[{"total_rate_eps": 5}, {"pattern": "burst"}])
    runs = expand_experiment_matrix(cfg)
    assert [r.run_id for r in runs] == ["workload-0_rep1", "workload-1_rep1"]
    assert runs[1].config["workload"]["pattern"] == "burst"


def test_matrix_cap():
    cfg = make_config(workload={"total_rate_eps": list(range(1, 11))}, repetitions=3)
    with pytest.raises(MatrixTooLarge):
        expand_experiment_matrix(cfg, max_runs=29)
    assert len(expand_experiment_matrix(cfg, max_runs=30)) == 30


def test_duplicate_values_rejected():
    cfg = make_config(workload={"total_rate_eps": [5, 5]})
    with pytest.raises(ConfigError):
        expand_experiment_matrix(cfg)


def test_hash_and_manifest_roundtrip(tmp_path):
    run = expand_experiment_matrix(make_config())[0]
    path = tmp_path / "config.resolved.yaml"
    dump_resolved(run, path)
    reloaded = yaml.safe_load(path.read_text())
    assert config_hash(reloaded) == run.content_hash()
    m = RunManifest("t", run.run_id, run.assignment, run.content_hash(), {"hostname": "h"}, status="ok",
                    details={"x": [1, 2]})
    m.write(tmp_path / "manifest.json")
    assert RunManifest.read(tmp_path / "manifest.json") == m


def test_load_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("experiment_name: x\nworkload: {total_rate_eps: 5}\n")
    assert validate_config(load_config(p))["experiment_name"] == "x"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationErrors):
        load_config(p)
