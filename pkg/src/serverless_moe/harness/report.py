"""Run directories and comparison tables.

Each run directory holds:

``samples.csv``    timestamp,role,pid,cpu_percent,rss_bytes
``counters.csv``   function,invocations,cold_starts,max_concurrent_replicas,total_warm_ms,bytes_in,bytes_out,completed,timeouts,upstream_errors
``residency.csv``  snapshot,timestamp,role,pid,unit,expert_bytes,trunk_bytes
``outputs.txt``    one ``tenant<TAB>request<TAB>hex`` line per request (``ERROR: ...`` on failure)
``summary.json``   the machine-readable summary used by ``report``
``report.md``      human-readable summary
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, fields
from pathlib import Path

from ..faas.core import FunctionCounters
from .strategies import RunReport

SUMMARY_VERSION = 1
TABLE_COLUMNS = (
    "strategy", "tenants", "requests", "block_size", "processes", "failed", "mismatches",
    "invocations", "cold_starts", "expert_bytes", "trunk_bytes", "per_tenant_bytes",
    "cpu_percent_total", "rss_bytes_total", "wall_s",
)


class ReportError(RuntimeError):
    pass


def summarize(report: RunReport) -> dict:
    sc = report.strategy
    usage = report.role_usage()
    return {
        "version": SUMMARY_VERSION,
        "strategy": sc.kind.value,
        "tenants": sc.tenants,
        "requests": sc.requests,
        "block_size": sc.block_size,
        "seed": sc.seed,
        "skew": sc.skew,
        "max_new": sc.max_new,
        "processes": sc.processes,
        "window_ms": sc.window_ms,
        "model": {k: v for k, v in asdict(sc.cfg).items()},
        "total_requests": len(report.outcomes),
        "failed": report.failed,
        "mismatches": len(report.mismatches),
        "degraded": report.degraded,
        "invocations": report.invocations,
        "invocations_per_layer": report.invocations_per_layer,
        "functions_registered": report.functions_registered,
        "cold_starts": report.cold_starts,
        "expert_bytes": report.expert_bytes,
        "trunk_bytes": report.trunk_bytes,
        "per_tenant_bytes": report.per_tenant_bytes,
        "role_usage": usage,
        "cpu_percent_total": sum(u["cpu_percent"] for u in usage.values()),
        "rss_bytes_total": sum(u["rss_bytes"] for u in usage.values()),
        "latency_ms": _quantiles(report.latencies_ms),
        "wall_s": report.wall_s,
    }


def _quantiles(values: list[float]) -> dict:
    if not values:
        return {}
    ordered = sorted(values)
    pick = lambda q: ordered[min(len(ordered) - 1, int(q * len(ordered)))]  # noqa: E731
    return {"mean": sum(ordered) / len(ordered), "p50": pick(0.5), "p95": pick(0.95), "max": ordered[-1]}


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_run(report: RunReport, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "samples.csv", ("timestamp", "role", "pid", "cpu_percent", "rss_bytes"),
               [(s.timestamp, s.role, s.pid, s.cpu_percent, s.rss_bytes) for s in report.samples])
    counter_fields = [f.name for f in fields(FunctionCounters)]
    rows = []
    if report.platform_counters:
        for name, c in report.platform_counters["functions"].items():
            rows.append([name, *(c[f] for f in counter_fields)])
    _write_csv(out / "counters.csv", ("function", *counter_fields), rows)
    _write_csv(out / "residency.csv",
               ("snapshot", "timestamp", "role", "pid", "unit", "expert_bytes", "trunk_bytes"),
               [(r.snapshot, r.timestamp, r.role, r.pid, r.unit, r.expert_bytes, r.trunk_bytes)
                for r in report.residency])
    with (out / "outputs.txt").open("w") as fh:
        for o in sorted(report.outcomes, key=lambda o: (o.tenant, o.index)):
            fh.write(f"{o.tenant}\t{o.index}\t{o.text.hex() if o.error is None else 'ERROR: ' + o.error}\n")
    summary = summarize(report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "report.md").write_text(markdown_table([summary]) + "\n" + _roles_md(summary))
    return out


def _roles_md(summary: dict) -> str:
    usage = summary["role_usage"]
    if not usage:
        return ""
    lines = ["", "| role | cpu_percent | rss_bytes |", "|---|---|---|"]
    for role, u in sorted(usage.items()):
        lines.append(f"| {role} | {u['cpu_percent']:.2f} | {u['rss_bytes']:.0f} |")
    return "\n".join(lines) + "\n"


def load_summaries(paths: list[str | Path]) -> list[dict]:
    """Read ``summary.json`` from run directories (searching one level down too)."""
    found = []
    for p in map(Path, paths):
        candidates = [p / "summary.json"] if (p / "summary.json").exists() else sorted(p.glob("*/summary.json"))
        if not candidates:
            raise ReportError(f"{p / 'summary.json'}: no run data found")
        for c in candidates:
            try:
                data = json.loads(c.read_text())
            except (OSError, ValueError) as exc:
                raise ReportError(f"{c}: unreadable summary ({exc})") from None
            missing = [k for k in TABLE_COLUMNS if k not in data]
            if missing:
                raise ReportError(f"{c}: corrupt summary, missing {missing}")
            found.append(data)
    return found


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def table_rows(summaries: list[dict]) -> list[list]:
    return [[s[c] for c in TABLE_COLUMNS] for s in summaries]


def markdown_table(summaries: list[dict]) -> str:
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    for row in table_rows(summaries):
        lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def csv_table(summaries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in table_rows(summaries):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def role_breakdown(summaries: list[dict], fmt: str = "md") -> str:
    """Per-role CPU/RSS per run (client, orchestrator, gateway, platform, worker, server)."""
    roles = ("client", "orchestrator", "gateway", "platform", "worker", "server")
    header = ["strategy", "block_size", *[f"{r}_cpu" for r in roles], *[f"{r}_rss" for r in roles]]
    rows = []
    for s in summaries:
        u = s.get("role_usage", {})
        rows.append([s["strategy"], s["block_size"],
                     *[u.get(r, {}).get("cpu_percent", 0.0) for r in roles],
                     *[u.get(r, {}).get("rss_bytes", 0.0) for r in roles]])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in r] for r in rows])
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def sweep_table(summaries: list[dict], fmt: str = "md") -> str:
    """Block-size comparison, one row per (strategy, block size)."""
    cols = ("strategy", "block_size", "invocations", "cold_starts", "expert_bytes", "cpu_percent_total", "rss_bytes_total")
    rows = sorted(([s[c] for c in cols] for s in summaries), key=lambda r: (r[0], r[1]))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerows([[_fmt(v) for v in r] for r in rows])
        return buf.getvalue()
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render(summaries: list[dict], fmt: str = "md") -> str:
    if fmt not in ("md", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    parts = [markdown_table(summaries) if fmt == "md" else csv_table(summaries)]
    parts.append(role_breakdown(summaries, fmt))
    if len({s["block_size"] for s in summaries}) > 1:
        parts.append(sweep_table(summaries, fmt))
    return "\n".join(parts)
