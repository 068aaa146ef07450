"""Master experiment configuration: schema, validation, matrix expansion."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import platform
import re
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .events import MAX_EVENT_SIZE, MIN_EVENT_SIZE, worst_case_size

DEFAULT_MAX_RUNS = 10_000
PIPELINE_KINDS = ("pass_through", "cpu_intensive", "memory_intensive")
PATTERNS = ("constant", "random", "burst")

# (default, type, expandable). A dict default means a nested section.
_WORKLOAD_SCHEMA: dict[str, tuple[Any, type | tuple, bool]] = {
    "pattern": ("constant", str, True),
    "total_rate_eps": (None, int, True),
    "per_instance_cap_eps": (500_000, int, False),
    "num_sensors": (100, int, True),
    "temp_min_c": (0.0, (int, float), False),
    "temp_max_c": (100.0, (int, float), False),
    "seed": (0, int, False),
}
_RANDOM_SCHEMA = {
    "min_pause_ms": (100, int, False),
    "max_pause_ms": (1000, int, False),
    "min_freq_eps": (1000, int, False),
    "max_freq_eps": (10_000, int, False),
}
_BURST_SCHEMA = {
    "interval_ms": (1000, int, False),
    "burst_freq_eps": (10_000, int, False),
}
_BROKER_SCHEMA = {
    "partitions": (4, int, True),
    "partition_capacity": (1_048_576, int, False),
}
_PIPELINE_SCHEMA = {
    "kind": ("pass_through", str, True),
    "parallelism": (1, int, True),
    "threshold_f": (122.0, (int, float), True),
    "window_len_ms": (5000, int, True),
    "window_slide_ms": (1000, int, True),
    "window_time": ("processing", str, False),
    "parse_in_passthrough": (False, bool, False),
    "executor": ("thread", str, False),
}
# cpus_per_task and mem_gb are explicit requests; left unset, the computed
# minimum is used. max_* are the cluster caps requests are checked against.
_RESOURCES_SCHEMA = {
    "cpus_per_task": (None, int, False),
    "mem_gb": (None, int, False),
    "nodes": (1, int, False),
    "engine_mem_gb": (4, int, False),
    "max_cpus": (104, int, False),
    "max_mem_gb": (200, int, False),
}
_OPTIONAL = {"resources.cpus_per_task", "resources.mem_gb"}
_METRICS_SCHEMA = {
    "interval_ms": (1000, int, False),
    "latency_sample_every": (1, int, False),
}
_TOP_SCHEMA = {
    "experiment_name": (None, str, False),
    "event_size_bytes": (MIN_EVENT_SIZE, int, True),
    "duration_s": (10, int, True),
    "repetitions": (1, int, False),
    "output_dir": ("results", str, False),
    "drain_timeout_s": (30.0, (int, float), False),
    "max_runs": (DEFAULT_MAX_RUNS, int, False),
}
_SECTIONS = {
    "broker": _BROKER_SCHEMA,
    "pipeline": _PIPELINE_SCHEMA,
    "resources": _RESOURCES_SCHEMA,
    "metrics": _METRICS_SCHEMA,
}

# Order in which list-valued parameters vary; the last one varies fastest.
EXPANSION_ORDER = (
    "workload",
    "workload.pattern",
    "workload.total_rate_eps",
    "workload.num_sensors",
    "event_size_bytes",
    "broker.partitions",
    "pipeline.kind",
    "pipeline.parallelism",
    "pipeline.threshold_f",
    "pipeline.window_len_ms",
    "pipeline.window_slide_ms",
    "duration_s",
)


class ConfigError(Exception):
    pass


class ValidationErrors(ConfigError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("\n".join(f"{path}: {msg}" for path, msg in errors))


class MatrixTooLarge(ConfigError):
    pass


@dataclass
class RunConfig:
    """One fully resolved point of the experiment matrix."""

    run_id: str
    rep: int
    assignment: dict[str, Any]
    config: dict[str, Any]

    @property
    def experiment_name(self) -> str:
        return self.config["experiment_name"]

    def content_hash(self) -> str:
        return config_hash(self.config)


@dataclass
class RunManifest:
    experiment_name: str
    run_id: str
    assignment: dict[str, Any]
    config_hash: str
    host: dict[str, Any]
    harness_version: str = __version__
    started_at_ms: int | None = None
    ended_at_ms: int | None = None
    status: str = "running"
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment_name": self.experiment_name,
            "run_id": self.run_id,
            "assignment": self.assignment,
            "config_hash": self.config_hash,
            "host": self.host,
            "harness_version": self.harness_version,
            "started_at_ms": self.started_at_ms,
            "ended_at_ms": self.ended_at_ms,
            "status": self.status,
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunManifest":
        return cls(**d)

    def write(self, path: Path) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def host_descriptor() -> dict[str, Any]:
    import os

    return {
        "hostname": socket.gethostname(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
    }


def config_hash(config: dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValidationErrors([("", "configuration must be a YAML mapping")])
    return raw


def _type_ok(value: Any, typ: type | tuple) -> bool:
    if isinstance(value, bool) and typ is not bool:
        return False
    return isinstance(value, typ)


def _fill_section(
    raw: Any, schema: dict, path: str, errors: list[tuple[str, str]]
) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append((path, "expected a mapping"))
        raw = {}
    for key in raw:
        if key not in schema:
            errors.append((f"{path}.{key}".lstrip("."), "unknown key"))
    for key, (default, typ, expandable) in schema.items():
        kpath = f"{path}.{key}".lstrip(".")
        if key not in raw:
            if default is None and kpath not in _OPTIONAL:
                errors.append((kpath, "required"))
            out[key] = default
            continue
        value = raw[key]
        if isinstance(value, list):
            if not expandable:
                errors.append((kpath, "does not accept a list"))
            elif not value:
                errors.append((kpath, "list must be nonempty"))
            for i, v in enumerate(value):
                if not _type_ok(v, typ):
                    errors.append((f"{kpath}[{i}]", f"expected {_type_name(typ)}"))
        elif not _type_ok(value, typ):
            errors.append((kpath, f"expected {_type_name(typ)}"))
        out[key] = value
    return out


def _type_name(typ: type | tuple) -> str:
    if isinstance(typ, tuple):
        return "number"
    return {int: "integer", str: "string", bool: "boolean"}.get(typ, typ.__name__)


def _values(v: Any) -> list:
    return v if isinstance(v, list) else [v]


def _check(values: list, pred, path: str, msg: str, errors: list) -> None:
    if not isinstance(values, list):
        values = [values]
    for i, v in enumerate(values):
        if isinstance(v, (int, float)) and not isinstance(v, bool) and not pred(v):
            where = path if len(values) == 1 else f"{path}[{i}]"
            errors.append((where, msg))


def _validate_workload(raw: Any, path: str, errors: list) -> dict[str, Any]:
    local: list[tuple[str, str]] = []
    wl = _fill_section(
        {k: v for k, v in (raw or {}).items() if k not in ("random", "burst")}
        if isinstance(raw, dict)
        else raw,
        _WORKLOAD_SCHEMA,
        path,
        local,
    )
    # Random and burst patterns take their rates from their own sections.
    if "constant" not in _values(wl["pattern"]):
        local = [e for e in local if e != (f"{path}.total_rate_eps", "required")]
    errors.extend(local)
    raw = raw if isinstance(raw, dict) else {}
    wl["random"] = _fill_section(raw.get("random"), _RANDOM_SCHEMA, f"{path}.random", errors)
    wl["burst"] = _fill_section(raw.get("burst"), _BURST_SCHEMA, f"{path}.burst", errors)

    for i, p in enumerate(_values(wl["pattern"])):
        if isinstance(p, str) and p not in PATTERNS:
            errors.append((f"{path}.pattern", f"must be one of {', '.join(PATTERNS)}"))
    _check(wl["total_rate_eps"], lambda v: v >= 1, f"{path}.total_rate_eps", "must be >= 1", errors)
    _check(wl["per_instance_cap_eps"], lambda v: v >= 1, f"{path}.per_instance_cap_eps", "must be >= 1", errors)
    _check(wl["num_sensors"], lambda v: v >= 1, f"{path}.num_sensors", "must be >= 1", errors)
    tmin, tmax = wl["temp_min_c"], wl["temp_max_c"]
    if _is_num(tmin) and _is_num(tmax) and tmin > tmax:
        errors.append((f"{path}.temp_max_c", "must be >= temp_min_c"))

    r = wl["random"]
    for key in r:
        _check(r[key], lambda v: v >= 0, f"{path}.random.{key}", "must be >= 0", errors)
    if _is_num(r["min_pause_ms"]) and _is_num(r["max_pause_ms"]) and r["min_pause_ms"] > r["max_pause_ms"]:
        errors.append((f"{path}.random.min_pause_ms", "must be <= max_pause_ms"))
    if _is_num(r["min_freq_eps"]) and _is_num(r["max_freq_eps"]) and r["min_freq_eps"] > r["max_freq_eps"]:
        errors.append((f"{path}.random.min_freq_eps", "must be <= max_freq_eps"))
    b = wl["burst"]
    _check(b["interval_ms"], lambda v: v >= 1, f"{path}.burst.interval_ms", "must be >= 1", errors)
    _check(b["burst_freq_eps"], lambda v: v >= 1, f"{path}.burst.burst_freq_eps", "must be >= 1", errors)
    return wl


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Check ``raw`` against the schema and fill defaults.

    Every violation is collected before raising ``ValidationErrors``; each
    entry is ``(key_path, message)``.
    """
    errors: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ValidationErrors([("", "configuration must be a mapping")])
    known = set(_TOP_SCHEMA) | set(_SECTIONS) | {"workload"}
    top = _fill_section({k: v for k, v in raw.items() if k in _TOP_SCHEMA}, _TOP_SCHEMA, "", errors)
    for key in raw:
        if key not in known:
            errors.append((key, "unknown key"))
    cfg: dict[str, Any] = dict(top)

    if "workload" not in raw:
        errors.append(("workload", "required"))
        workloads = [_validate_workload({"total_rate_eps": 1}, "workload", [])]
    elif isinstance(raw["workload"], list):
        if not raw["workload"]:
            errors.append(("workload", "list must be nonempty"))
        workloads = [_validate_workload(w, f"workload[{i}]", errors) for i, w in enumerate(raw["workload"])]
    else:
        workloads = [_validate_workload(raw["workload"], "workload", errors)]
    cfg["workload"] = workloads if isinstance(raw.get("workload"), list) else workloads[0]

    for name, schema in _SECTIONS.items():
        cfg[name] = _fill_section(raw.get(name), schema, name, errors)

    if isinstance(cfg["experiment_name"], str) and not re.fullmatch(r"[A-Za-z0-9_.-]+", cfg["experiment_name"]):
        errors.append(("experiment_name", "may only contain letters, digits, '_', '.', '-'"))
    _check(cfg["event_size_bytes"], lambda v: v >= MIN_EVENT_SIZE, "event_size_bytes",
           f"must be >= {MIN_EVENT_SIZE} bytes", errors)
    _check(cfg["event_size_bytes"], lambda v: v <= MAX_EVENT_SIZE, "event_size_bytes",
           f"must be <= {MAX_EVENT_SIZE} bytes", errors)
    _check(cfg["duration_s"], lambda v: v >= 0, "duration_s", "must be >= 0", errors)
    _check(cfg["repetitions"], lambda v: v >= 1, "repetitions", "must be >= 1", errors)
    _check(cfg["drain_timeout_s"], lambda v: v >= 0, "drain_timeout_s", "must be >= 0", errors)
    _check(cfg["max_runs"], lambda v: v >= 1, "max_runs", "must be >= 1", errors)

    # Events must fit the requested size for every workload variant.
    for wi, wl in enumerate(workloads):
        if not all(_is_num(v) for v in _values(wl["num_sensors"]) + [wl["temp_min_c"], wl["temp_max_c"]]):
            continue
        need = max(worst_case_size(n, wl["temp_min_c"], wl["temp_max_c"]) for n in _values(wl["num_sensors"]))
        for i, size in enumerate(_values(cfg["event_size_bytes"])):
            if _is_num(size) and MIN_EVENT_SIZE <= size < need:
                errors.append((
                    "event_size_bytes",
                    f"{size} B cannot hold the largest event of workload "
                    f"{wi}; effective minimum is {need} B",
                ))

    br = cfg["broker"]
    _check(br["partitions"], lambda v: v >= 1, "broker.partitions", "must be >= 1", errors)
    _check(br["partition_capacity"], lambda v: v >= 1, "broker.partition_capacity", "must be >= 1", errors)

    pl = cfg["pipeline"]
    for k in _values(pl["kind"]):
        if isinstance(k, str) and k not in PIPELINE_KINDS:
            errors.append(("pipeline.kind", f"must be one of {', '.join(PIPELINE_KINDS)}"))
    if pl["window_time"] not in ("processing", "event"):
        errors.append(("pipeline.window_time", "must be 'processing' or 'event'"))
    if pl["executor"] not in ("thread", "process"):
        errors.append(("pipeline.executor", "must be 'thread' or 'process'"))
    _check(pl["parallelism"], lambda v: v >= 1, "pipeline.parallelism", "must be >= 1", errors)
    _check(pl["window_len_ms"], lambda v: v >= 1, "pipeline.window_len_ms", "must be >= 1", errors)
    _check(pl["window_slide_ms"], lambda v: v >= 1, "pipeline.window_slide_ms", "must be >= 1", errors)
    for wlen in _values(pl["window_len_ms"]):
        for slide in _values(pl["window_slide_ms"]):
            if not (_is_num(wlen) and _is_num(slide)) or wlen < 1 or slide < 1:
                continue
            if slide > wlen:
                errors.append(("pipeline.window_slide_ms", f"{slide} exceeds window_len_ms {wlen}"))
            elif wlen % slide:
                errors.append(("pipeline.window_slide_ms", f"{slide} does not divide window_len_ms {wlen}"))
    for par in _values(pl["parallelism"]):
        for parts in _values(br["partitions"]):
            if _is_num(par) and _is_num(parts) and par > parts >= 1:
                errors.append(("pipeline.parallelism", f"{par} exceeds broker.partitions {parts}"))

    res = cfg["resources"]
    for key in res:
        _check(res[key], lambda v: v >= 1, f"resources.{key}", "must be >= 1", errors)
    met = cfg["metrics"]
    _check(met["interval_ms"], lambda v: v >= 100, "metrics.interval_ms", "must be >= 100", errors)
    _check(met["latency_sample_every"], lambda v: v >= 1, "metrics.latency_sample_every", "must be >= 1", errors)

    if errors:
        raise ValidationErrors(_dedupe(errors))
    return cfg


def _dedupe(errors: list[tuple[str, str]]) -> list[tuple[str, str]]:
    seen = set()
    out = []
    for e in errors:
        if e not in seen:
            seen.add(e)
            out.append(e)
    return out


def _get(cfg: dict, path: str) -> Any:
    node: Any = cfg
    for part in path.split("."):
        node = node[part]
    return node


def _set(cfg: dict, path: str, value: Any) -> None:
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def slugify(text: str) -> str:
    return re.sub(r"[^a-z0-9.-]+", "-", str(text).lower()).strip("-")


def expand_experiment_matrix(cfg: dict[str, Any], max_runs: int | None = None) -> list[RunConfig]:
    """Cartesian product over list-valued parameters, times repetitions.

    Run ids are ``<param-slug>_rep<k>`` with ``k`` counting from 1; the slug
    names only the parameters that vary, or is ``base`` when none do.
    """
    cap = max_runs if max_runs is not None else cfg.get("max_runs", DEFAULT_MAX_RUNS)
    workloads = cfg["workload"] if isinstance(cfg["workload"], list) else [cfg["workload"]]
    workload_is_list = isinstance(cfg["workload"], list)

    # Each workload variant has its own inner lists; expand per variant.
    combos: list[list[tuple[str, Any]]] = []
    for wi, wl in enumerate(workloads):
        base = copy.deepcopy(cfg)
        base["workload"] = copy.deepcopy(wl)
        axes: list[tuple[str, list]] = []
        if workload_is_list:
            axes.append(("workload", [wi]))
        for path in EXPANSION_ORDER[1:]:
            val = _get(base, path)
            if isinstance(val, list):
                axes.append((path, val))
        size = 1
        for _, vals in axes:
            size *= len(vals)
        if size * cfg["repetitions"] + len(combos) * cfg["repetitions"] > cap:
            raise MatrixTooLarge(f"matrix would exceed {cap} runs")
        for point in itertools.product(*[vals for _, vals in axes]):
            combos.append(list(zip([p for p, _ in axes], point)))

    runs: list[RunConfig] = []
    for combo in combos:
        wi = dict(combo).get("workload", 0)
        resolved = copy.deepcopy(cfg)
        resolved["workload"] = copy.deepcopy(workloads[wi])
        for path, value in combo:
            if path != "workload":
                _set(resolved, path, value)
        slug = "_".join(f"{slugify(p.rsplit('.', 1)[-1])}-{slugify(v)}" for p, v in combo) or "base"
        for k in range(1, cfg["repetitions"] + 1):
            run_cfg = copy.deepcopy(resolved)
            run_cfg["rep"] = k
            run_cfg["run_id"] = f"{slug}_rep{k}"
            runs.append(RunConfig(
                run_id=run_cfg["run_id"],
                rep=k,
                assignment={p: v for p, v in combo},
                config=run_cfg,
            ))
    ids = [r.run_id for r in runs]
    if len(set(ids)) != len(ids):
        raise ConfigError("run ids are not unique; check list-valued parameters for duplicates")
    return runs


def dump_resolved(run: RunConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(run.config, sort_keys=True), encoding="utf-8")
