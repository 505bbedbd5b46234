"""Tables and plot data built from a results directory."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .checkpoint import SchemaVersionError, check_version

RESULTS_SCHEMA = "mlap-results"
RESULTS_VERSION = "1.0"
REQUIRED_RECORD_FIELDS = ("family", "method", "seed", "n_train_tasks", "status")
OK_RECORD_FIELDS = ("test_errors", "test_error_mean", "half_width_95")

NOTES = [
    "MAML is not included in the comparison.",
    "Warm-start and oracle baselines start from the solution of the first training task.",
    "All networks are fully connected; no convolutional layers are used.",
]


class ResultsSchemaError(ValueError):
    pass


def read_results(results_dir) -> dict:
    path = Path(results_dir) / "results.json"
    if not path.exists():
        raise FileNotFoundError(f"no results.json in {results_dir}")
    data = json.loads(path.read_text())
    if data.get("schema") != RESULTS_SCHEMA:
        raise ResultsSchemaError(f"{path}: missing or wrong 'schema' field")
    check_version(data.get("version", ""), RESULTS_VERSION, str(path))
    if "records" not in data:
        raise ResultsSchemaError(f"{path}: missing field 'records'")
    for i, r in enumerate(data["records"]):
        need = REQUIRED_RECORD_FIELDS + (OK_RECORD_FIELDS if r.get("status") == "ok" else ())
        missing = [f for f in need if f not in r]
        if missing:
            raise ResultsSchemaError(f"{path}: record {i} missing field(s) {missing}")
    return data


def pooled_se(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size < 2:
        return 0.0
    return float(errors.std(ddof=1) / math.sqrt(errors.size))


def trend_label(means, ses) -> str:
    """``improving`` when the curve never rises by more than one pooled
    standard error between consecutive task counts and ends below its start."""
    if len(means) < 2:
        return "n/a"
    pooled = math.sqrt(float(np.mean(np.square(ses))))
    steps_ok = all(b <= a + pooled for a, b in zip(means[:-1], means[1:]))
    if steps_ok and means[-1] < means[0]:
        return "improving"
    return "not improving"


def error_curve(records):
    """Rows ``(family, method, n, mean, se, n_seeds, trend)`` pooled over seeds and meta-test tasks."""
    groups = defaultdict(lambda: defaultdict(list))
    seeds = defaultdict(set)
    for r in records:
        if r["status"] != "ok":
            continue
        groups[(r["family"], r["method"])][r["n_train_tasks"]].extend(r["test_errors"])
        seeds[(r["family"], r["method"], r["n_train_tasks"])].add(r["seed"])
    rows = []
    for (fam, meth), by_n in sorted(groups.items()):
        ns = sorted(by_n)
        means = [float(np.mean(by_n[n])) for n in ns]
        ses = [pooled_se(by_n[n]) for n in ns]
        trend = trend_label(means, ses)
        for n, mean, se in zip(ns, means, ses):
            rows.append((fam, meth, n, mean, se, len(seeds[(fam, meth, n)]), trend))
    return rows


def layer_rows(records):
    rows = []
    for r in records:
        for p in r.get("layer_profile") or []:
            rows.append((r["family"], r["method"], r["seed"], r["n_train_tasks"], p["layer"],
                         p["mean_log_var"], p["std_log_var"]))
    return rows


def method_table(records):
    """Table-1 shaped rows ``(family, method, n, mean, half_width)``."""
    groups = defaultdict(list)
    for r in records:
        if r["status"] == "ok":
            groups[(r["family"], r["method"], r["n_train_tasks"])].extend(r["test_errors"])
    rows = []
    for key, errs in sorted(groups.items()):
        errs = np.asarray(errs, dtype=float)
        hw = 1.96 * pooled_se(errs)
        rows.append((*key, float(errs.mean()), hw))
    return rows


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def curve_svg(rows, width=480, height=300) -> str:
    pad = 40
    ns = sorted({r[2] for r in rows})
    errs = [r[3] for r in rows]
    if not ns:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    lo, hi = min(errs), max(errs)
    hi = hi if hi > lo else lo + 1e-3

    def xy(n, e):
        x = pad + (ns.index(n) / max(len(ns) - 1, 1)) * (width - 2 * pad)
        y = height - pad - (e - lo) / (hi - lo) * (height - 2 * pad)
        return x, y

    colors = ["blue", "red", "green", "purple", "orange", "black"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    series = defaultdict(list)
    for r in rows:
        series[(r[0], r[1])].append(r)
    for i, (key, rs) in enumerate(sorted(series.items())):
        c = colors[i % len(colors)]
        pts = [xy(r[2], r[3]) for r in rs]
        parts.append('<polyline fill="none" stroke="%s" points="%s"/>'
                     % (c, " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)))
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" fill="{c}" font-size="11" '
                     f'text-anchor="end">{key[0]} {key[1]}</text>')
    for n in ns:
        x, _ = xy(n, lo)
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 15}" font-size="11" text-anchor="middle">{n}</text>')
    parts.append(f'<text x="5" y="{pad}" font-size="11">{hi:.3f}</text>')
    parts.append(f'<text x="5" y="{height - pad}" font-size="11">{lo:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(results_dir, svg: bool = False) -> list:
    """Write error-curve, layer-profile and method-comparison tables; returns written paths."""
    results_dir = Path(results_dir)
    data = read_results(results_dir)
    recs = data["records"]
    out = results_dir / "report"
    out.mkdir(exist_ok=True)
    curve = error_curve(recs)
    layers = layer_rows(recs)
    table = method_table(recs)
    written = []
    p = out / "error_vs_tasks.csv"
    _write_csv(p, ["family", "method", "n_train_tasks", "mean_error", "se", "n_seeds", "trend"], curve)
    written.append(p)
    p = out / "layer_profile.csv"
    _write_csv(p, ["family", "method", "seed", "n_train_tasks", "layer", "mean_log_var", "std_log_var"], layers)
    written.append(p)
    p = out / "method_table.csv"
    _write_csv(p, ["family", "method", "n_train_tasks", "mean_error", "half_width_95"], table)
    written.append(p)

    lines = ["# Results", "", "## Test error by method", "",
             "| environment | method | training tasks | test error (%) |", "|---|---|---|---|"]
    for fam, meth, n, mean, hw in table:
        lines.append(f"| {fam} | {meth} | {n} | {100 * mean:.2f} ± {100 * hw:.2f} |")
    lines += ["", "## Test error against number of training tasks", "",
              "| environment | method | training tasks | mean error | se | trend |", "|---|---|---|---|---|---|"]
    for fam, meth, n, mean, se, _, trend in curve:
        lines.append(f"| {fam} | {meth} | {n} | {mean:.4f} | {se:.4f} | {trend} |")
    lines += ["", "## Prior log-variance per layer", "",
              "| environment | method | seed | training tasks | layer | mean | std |", "|---|---|---|---|---|---|---|"]
    for fam, meth, seed, n, k, m, s in layers:
        lines.append(f"| {fam} | {meth} | {seed} | {n} | {k} | {m:.3f} | {s:.3f} |")
    failed = [r for r in recs if r["status"] != "ok"]
    if failed:
        lines += ["", "## Failed runs", ""]
        lines += [f"- {r['method']} seed {r['seed']} n={r['n_train_tasks']}: {r.get('error', '')}" for r in failed]
    lines += ["", "## Notes", ""] + [f"- {n}" for n in NOTES]
    p = out / "report.md"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)
    if svg:
        p = out / "error_vs_tasks.svg"
        p.write_text(curve_svg(curve))
        written.append(p)
    return written


__all__ = ["emit_report", "read_results", "trend_label", "error_curve", "layer_rows", "method_table",
           "ResultsSchemaError", "SchemaVersionError", "RESULTS_SCHEMA", "RESULTS_VERSION"]
