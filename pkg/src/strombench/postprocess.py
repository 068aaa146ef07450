"""Offline post-processing of run directories.

Loads the CSVs and manifest a run leaves behind, checks them, trims warmup
and cooldown, aggregates repetitions, and writes plot-ready CSV tables.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml

from .config import RunManifest
from .metrics import (
    EXTERNAL_COLUMNS,
    LATENCY_COLUMNS,
    LATENCY_KINDS,
    PROCESS_COLUMNS,
    TAPS,
    THROUGHPUT_COLUMNS,
    MetricSeries,
    format_cell,
    parse_cell,
)

DEFAULT_WARMUP_FRACTION = 0.1
EXTERNAL_TOLERANCE_MS = 500

SERIES_COLUMNS: dict[str, tuple[str, ...]] = {
    **{f"throughput_{tap}": THROUGHPUT_COLUMNS for tap in TAPS},
    **{f"latency_{kind}": LATENCY_COLUMNS for kind in LATENCY_KINDS},
    "process": PROCESS_COLUMNS,
}
# Columns holding text; everything else must parse as a number or be empty.
_TEXT_COLUMNS = {"kind", "source", "metric"}


class RunLoadError(Exception):
    def __init__(self, path: Path | str, line: int | None, message: str):
        self.path = Path(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else str(self.path)
        super().__init__(f"{where}: {message}")


@dataclass
class RunData:
    run_dir: Path
    manifest: RunManifest
    config: dict[str, Any]
    series: dict[str, MetricSeries]
    external: list[MetricSeries] = field(default_factory=list)


def _read_csv(path: Path, columns: tuple[str, ...] | None) -> MetricSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise RunLoadError(path, 1, "empty file, expected a header") from None
        if columns is not None and header != columns:
            raise RunLoadError(path, 1, f"header {','.join(header)} does not match {','.join(columns)}")
        rows = []
        for line_no, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise RunLoadError(path, line_no, f"expected {len(header)} fields, found {len(cells)}")
            row = tuple(parse_cell(c) for c in cells)
            for name, value in zip(header, row):
                if name not in _TEXT_COLUMNS and isinstance(value, str):
                    raise RunLoadError(path, line_no, f"column {name!r} is not numeric: {value!r}")
            if row[0] is None:
                raise RunLoadError(path, line_no, "missing ts_ms")
            rows.append(row)
    return MetricSeries(path.stem, header, rows)


def load_run(run_dir: str | Path) -> RunData:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise RunLoadError(manifest_path, None, "manifest not found")
    try:
        manifest = RunManifest.read(manifest_path)
    except json.JSONDecodeError as exc:
        raise RunLoadError(manifest_path, exc.lineno, exc.msg) from None
    except TypeError as exc:
        raise RunLoadError(manifest_path, None, f"unexpected manifest layout: {exc}") from None
    config_path = run_dir / "config.resolved.yaml"
    if not config_path.is_file():
        raise RunLoadError(config_path, None, "resolved config not found")
    config = yaml.safe_load(config_path.read_text(encoding="utf-8"))

    series = {}
    for name, columns in SERIES_COLUMNS.items():
        path = run_dir / "metrics" / f"{name}.csv"
        if not path.is_file():
            raise RunLoadError(path, None, "metric series not found")
        series[name] = _read_csv(path, columns)
    external = []
    ext_dir = run_dir / "metrics" / "external"
    if ext_dir.is_dir():
        for path in sorted(ext_dir.glob("*.csv")):
            external.append(_read_csv(path, EXTERNAL_COLUMNS))
    return RunData(run_dir, manifest, config, series, external)


def find_runs(results_dir: str | Path) -> list[Path]:
    """Run directories below ``results_dir``, in sorted path order."""
    return sorted(p.parent for p in Path(results_dir).rglob("manifest.json"))


def trim_warmup(series: MetricSeries, fraction: float = DEFAULT_WARMUP_FRACTION) -> MetricSeries:
    """Drop ``ceil(fraction * n)`` samples at each end and add ``t_norm``.

    ``t_norm`` maps the remaining timestamps linearly onto [0, 1].
    """
    if not 0 <= fraction < 0.5:
        raise ValueError("fraction must be in [0, 0.5)")
    n = len(series.rows)
    cut = math.ceil(fraction * n)
    kept = series.rows[cut:n - cut] if cut else list(series.rows)
    if kept:
        t0, t1 = kept[0][0], kept[-1][0]
        span = t1 - t0
        rows = [((r[0] - t0) / span if span else 0.0,) + tuple(r) for r in kept]
    else:
        rows = []
    return MetricSeries(series.name, ("t_norm",) + tuple(series.columns), rows)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass(frozen=True)
class ConservationViolation(Violation):
    expected: int
    actual: int

    @property
    def delta(self) -> int:
        return self.actual - self.expected


@dataclass(frozen=True)
class LatencyViolation(Violation):
    latency_kind: str
    count: int


@dataclass(frozen=True)
class OrderViolation(Violation):
    series: str
    row: int


def _final_count(data: RunData, tap: str) -> int:
    rows = data.series[f"throughput_{tap}"].rows
    return int(rows[-1][1]) if rows else 0


def validate_run(data: RunData) -> list[Violation]:
    """Conservation across taps, negative latency flags, timestamp order."""
    out: list[Violation] = []
    counts = {tap: _final_count(data, tap) for tap in TAPS}
    kind = data.config["pipeline"]["kind"]
    chain = ["generator", "broker_in", "processor"]
    if kind != "memory_intensive":
        chain.append("broker_out")
    for a, b in zip(chain, chain[1:]):
        if counts[a] != counts[b]:
            out.append(ConservationViolation(
                "conservation", f"{b} saw {counts[b]} events, {a} saw {counts[a]}",
                expected=counts[a], actual=counts[b]))
    if kind == "memory_intensive":
        expected = data.manifest.details.get("expected_window_results")
        if expected is None:
            out.append(Violation("conservation", "manifest lacks expected_window_results"))
        elif counts["broker_out"] != expected:
            out.append(ConservationViolation(
                "conservation", f"broker_out saw {counts['broker_out']} window results, expected {expected}",
                expected=int(expected), actual=counts["broker_out"]))

    flags = data.manifest.details.get("negative_latency_flags", {})
    for lk in sorted(flags):
        if flags[lk]:
            out.append(LatencyViolation("latency", f"{flags[lk]} negative {lk} latencies",
                                        latency_kind=lk, count=int(flags[lk])))

    for name in sorted(data.series):
        rows = data.series[name].rows
        for i in range(1, len(rows)):
            if rows[i][0] <= rows[i - 1][0]:
                out.append(OrderViolation("order", f"{name}: ts_ms {rows[i][0]} does not follow {rows[i - 1][0]}",
                                          series=name, row=i))
                break
    return out


@dataclass
class TapSummary:
    events_total: int
    mean_eps: float | None
    max_eps: float | None
    mean_mbps: float | None
    max_mbps: float | None


@dataclass
class LatencySummary:
    count: int
    p50_us: float | None
    p95_us: float | None
    p99_us: float | None
    max_us: float | None
    mean_us: float | None


@dataclass
class RunReport:
    experiment: str
    run_id: str
    status: str
    pipeline: str
    parallelism: int
    offered_rate_eps: int | None
    rep: int
    samples: int
    samples_trimmed: int
    throughput: dict[str, TapSummary]
    latency: dict[str, LatencySummary]
    violations: list[Violation]

    @property
    def point(self) -> str:
        """Run id without the repetition suffix; equal across repetitions."""
        return re.sub(r"_rep\d+$", "", self.run_id)


def _mean_max(values: list) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return statistics.fmean(vals), float(max(vals))


def build_report(data: RunData, fraction: float = DEFAULT_WARMUP_FRACTION) -> RunReport:
    cfg = data.config
    throughput = {}
    samples = trimmed = 0
    for tap in TAPS:
        s = data.series[f"throughput_{tap}"]
        t = trim_warmup(s, fraction)
        samples, trimmed = len(s.rows), len(t.rows)
        mean_eps, max_eps = _mean_max(t.column("events_per_s"))
        mean_mbps, max_mbps = _mean_max(t.column("mb_per_s"))
        throughput[tap] = TapSummary(_final_count(data, tap), mean_eps, max_eps, mean_mbps, max_mbps)
    latency = {}
    means = data.manifest.details.get("latency", {})
    for kind in LATENCY_KINDS:
        rows = data.series[f"latency_{kind}"].rows
        # Latency rows are cumulative, so the last one covers the whole run.
        last = rows[-1] if rows else (None, kind, 0, None, None, None, None)
        latency[kind] = LatencySummary(int(last[2] or 0), last[3], last[4], last[5], last[6],
                                       means.get(kind, {}).get("mean_us"))
    return RunReport(
        experiment=cfg["experiment_name"],
        run_id=data.manifest.run_id,
        status=data.manifest.status,
        pipeline=cfg["pipeline"]["kind"],
        parallelism=cfg["pipeline"]["parallelism"],
        offered_rate_eps=cfg["workload"].get("total_rate_eps"),
        rep=cfg.get("rep", 1),
        samples=samples,
        samples_trimmed=trimmed,
        throughput=throughput,
        latency=latency,
        violations=validate_run(data),
    )


@dataclass
class ScalingTable:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple]


def _mean_sd(values: list[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    if len(vals) == 1:
        return float(vals[0]), 0.0
    return statistics.mean(vals), statistics.stdev(vals)


def aggregate(reports: Iterable[RunReport], by: str, tap: str, name: str | None = None) -> ScalingTable:
    """Mean and sample standard deviation over repetitions of each point.

    ``by`` names the independent variable (``offered_rate_eps`` or
    ``parallelism``); rows are sorted by experiment, then by its value.
    """
    groups: dict[tuple, list[RunReport]] = {}
    for r in reports:
        x = getattr(r, by)
        if x is None:
            continue
        groups.setdefault((r.experiment, x, r.point), []).append(r)
    rows = []
    for (exp, x, point), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        tp_mean, tp_sd = _mean_sd([m.throughput[tap].mean_eps for m in members])
        mb_mean, mb_sd = _mean_sd([m.throughput[tap].mean_mbps for m in members])
        lat_mean, lat_sd = _mean_sd([m.latency["end_to_end"].p99_us for m in members])
        rows.append((exp, point, x, len(members), tp_mean, tp_sd, mb_mean, mb_sd, lat_mean, lat_sd))
    columns = ("experiment", "point", by, "n", "throughput_eps_mean", "throughput_eps_sd",
               "throughput_mbps_mean", "throughput_mbps_sd", "p99_end_to_end_us_mean", "p99_end_to_end_us_sd")
    return ScalingTable(name or f"scaling_{by}", columns, rows)


def fit_slope(xs: list[float], ys: list[float]) -> float:
    """Least-squares slope of ``ys`` against ``xs``."""
    return statistics.linear_regression(xs, ys).slope


def merge_external(series: MetricSeries, external: list[MetricSeries],
                   tolerance_ms: float = EXTERNAL_TOLERANCE_MS) -> MetricSeries:
    """Add one ``ext_<metric>`` column per external metric.

    Each row takes the external sample nearest to its ``ts_ms`` if it lies
    within ``tolerance_ms``; otherwise the cell is left empty.
    """
    by_metric: dict[str, list[tuple[float, Any]]] = {}
    for ext in external:
        for ts, metric, value in ext.rows:
            by_metric.setdefault(str(metric), []).append((ts, value))
    if not by_metric:
        return series
    ts_idx = series.columns.index("ts_ms")
    names = sorted(by_metric)
    lookups = []
    for m in names:
        samples = sorted(by_metric[m], key=lambda s: s[0])
        lookups.append(([s[0] for s in samples], [s[1] for s in samples]))
    rows = []
    for row in series.rows:
        ts = row[ts_idx]
        extra = []
        for times, values in lookups:
            i = bisect.bisect_left(times, ts)
            best = None
            for j in (i - 1, i):
                if 0 <= j < len(times) and abs(times[j] - ts) <= tolerance_ms:
                    if best is None or abs(times[j] - ts) < abs(times[best] - ts):
                        best = j
            extra.append(values[best] if best is not None else None)
        rows.append(tuple(row) + tuple(extra))
    return MetricSeries(series.name, tuple(series.columns) + tuple(f"ext_{m}" for m in names), rows)


SUMMARY_COLUMNS = (
    ("experiment", "run_id", "status", "pipeline", "parallelism", "offered_rate_eps", "rep",
     "samples", "samples_trimmed")
    + tuple(f"{tap}_{m}" for tap in TAPS for m in ("events", "mean_eps", "max_eps", "mean_mbps", "max_mbps"))
    + tuple(f"{kind}_{m}" for kind in LATENCY_KINDS for m in ("p50_us", "p95_us", "p99_us", "max_us", "mean_us"))
    + ("violations", "violation_detail")
)


def summary_row(r: RunReport) -> tuple:
    row: list[Any] = [r.experiment, r.run_id, r.status, r.pipeline, r.parallelism, r.offered_rate_eps,
                      r.rep, r.samples, r.samples_trimmed]
    for tap in TAPS:
        t = r.throughput[tap]
        row += [t.events_total, t.mean_eps, t.max_eps, t.mean_mbps, t.max_mbps]
    for kind in LATENCY_KINDS:
        lat = r.latency[kind]
        row += [lat.p50_us, lat.p95_us, lat.p99_us, lat.max_us, lat.mean_us]
    row += [len(r.violations), "; ".join(v.message for v in r.violations)]
    return tuple(row)


def _write_rows(path: Path, columns: tuple[str, ...], rows: Iterable[tuple]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_cell(v) for v in row])
    return path


def emit_outputs(runs: list[RunData], reports: list[RunReport], out_dir: str | Path,
                 fraction: float = DEFAULT_WARMUP_FRACTION) -> list[Path]:
    out = Path(out_dir)
    written = []
    order = sorted(range(len(reports)), key=lambda i: (reports[i].experiment, reports[i].run_id))
    written.append(_write_rows(out / "summary.csv", SUMMARY_COLUMNS, [summary_row(reports[i]) for i in order]))
    for table in (aggregate(reports, "offered_rate_eps", "broker_in", "scaling_rate"),
                  aggregate(reports, "parallelism", "processor", "scaling_parallelism")):
        written.append(_write_rows(out / f"{table.name}.csv", table.columns, table.rows))

    multi = len({r.experiment for r in reports}) > 1
    for i in order:
        data, rep = runs[i], reports[i]
        sub = f"{rep.experiment}__{rep.run_id}" if multi else rep.run_id
        for name in sorted(data.series):
            s = data.series[name]
            if name == "process" and data.external:
                s = merge_external(s, data.external)
            t = trim_warmup(s, fraction)
            written.append(_write_rows(out / "timeseries" / sub / f"{name}.csv", t.columns, t.rows))
    return written


@dataclass
class PostprocessResult:
    reports: list[RunReport]
    files: list[Path]
    slopes: dict[str, float]

    @property
    def violations(self) -> int:
        return sum(len(r.violations) for r in self.reports)


def postprocess(results_dir: str | Path, out_dir: str | Path | None = None,
                fraction: float = DEFAULT_WARMUP_FRACTION) -> PostprocessResult:
    results_dir = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else results_dir / "postprocessed"
    dirs = find_runs(results_dir)
    if not dirs:
        raise RunLoadError(results_dir, None, "no run directories found")
    runs = [load_run(d) for d in dirs]
    reports = [build_report(d, fraction) for d in runs]
    files = emit_outputs(runs, reports, out, fraction)
    slopes = {}
    table = aggregate(reports, "offered_rate_eps", "broker_in")
    for exp in sorted({row[0] for row in table.rows}):
        pts = [(row[2], row[4]) for row in table.rows if row[0] == exp and row[4] is not None]
        if len({x for x, _ in pts}) >= 2:
            slopes[exp] = fit_slope([x for x, _ in pts], [y for _, y in pts])
    return PostprocessResult(reports, files, slopes)
