"""Cross-seed aggregation, Welch's t-test, Cohen's d, speedup, and report files.

The Student-t CDF goes through the regularized incomplete beta function,
evaluated with a modified-Lentz continued fraction.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_SCHEMA_VERSION = 1

# ----------------------------------------------------------- special funcs


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= |t|)."""
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def student_t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * student_t_sf2(t, dof)
    return 1.0 - tail if t > 0 else tail


# ------------------------------------------------------------------ stats


def aggregate(values: Sequence[float], ddof: int = 1) -> tuple[float, float]:
    """Mean and standard deviation (sample, n-1, by default). A single value has std 0."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    std = float(v.std(ddof=ddof)) if v.size > ddof else 0.0
    return float(v.mean()), std


@dataclass
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Unequal-variance two-sample t-test, Welch-Satterthwaite dof, two-sided p."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_t needs at least two samples per group")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = float(a.mean() - b.mean())
    if va + vb == 0.0:
        dof = float(a.size + b.size - 2)
        if diff == 0.0:
            return WelchResult(0.0, dof, 1.0)
        return WelchResult(math.copysign(math.inf, diff), dof, 0.0)
    t = diff / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return WelchResult(float(t), float(dof), float(min(1.0, max(0.0, student_t_sf2(float(t), float(dof))))))


def cohens_d(baseline: Sequence[float], method: Sequence[float]) -> float:
    """``(mean_base - mean_method) / sqrt((s_base^2 + s_method^2) / 2)``; +-inf when the pooled spread is zero."""
    b, m = np.asarray(baseline, float), np.asarray(method, float)
    diff = b.mean() - m.mean()
    pooled = math.sqrt((b.var(ddof=1) + m.var(ddof=1)) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return float(diff / pooled)


def effect_size_label(d: float) -> str:
    d = abs(d)
    if d < 0.2:
        return "negligible"
    if d < 0.5:
        return "small"
    if d < 0.8:
        return "medium"
    return "large"


def speedup_percent(steps_base: float | None, steps_method: float | None) -> float | None:
    if steps_base is None or steps_method is None or steps_base == 0:
        return None
    return (steps_base - steps_method) / steps_base * 100.0


# ---------------------------------------------------------------- reports


@dataclass
class RunResult:
    """One finished training run as consumed by the report."""

    dataset: str
    arch: str
    method: str
    seed: int
    final_val_acc: float | None
    steps_to_threshold: int | None
    steps_run: int
    wall_time: float


@dataclass
class StatsReport:
    dataset: str
    arch: str
    method: str
    n: int
    val_acc_mean: float | None
    val_acc_std: float | None
    steps_mean: float | None
    steps_std: float | None
    wall_time_mean: float
    speedup_pct: float | None
    welch_t: float | None
    welch_dof: float | None
    p_value: float | None
    cohens_d: float | None


def _steps(runs: list[RunResult]) -> list[float] | None:
    s = [r.steps_to_threshold for r in runs]
    return None if any(v is None for v in s) else [float(v) for v in s]


def build_reports(runs: Iterable[RunResult], baseline: str = "he") -> list[StatsReport]:
    """Per (dataset, arch, method) aggregates; tests and effect sizes on steps-to-threshold vs ``baseline``."""
    groups: dict[tuple[str, str, str], list[RunResult]] = defaultdict(list)
    for r in runs:
        groups[(r.dataset, r.arch, r.method)].append(r)
    reports = []
    for (ds, arch, method), rs in groups.items():
        rs.sort(key=lambda r: r.seed)
        accs = [r.final_val_acc for r in rs if r.final_val_acc is not None]
        acc_mean, acc_std = aggregate(accs) if accs else (None, None)
        steps = _steps(rs)
        steps_mean, steps_std = aggregate(steps) if steps else (None, None)
        base = groups.get((ds, arch, baseline))
        base_steps = _steps(base) if base else None
        sp = t = dof = p = d = None
        if method != baseline and steps and base_steps:
            sp = speedup_percent(float(np.mean(base_steps)), steps_mean)
            if len(steps) >= 2 and len(base_steps) >= 2:
                w = welch_t(base_steps, steps)
                t, dof, p = w.t, w.dof, w.p
                d = cohens_d(base_steps, steps)
        reports.append(StatsReport(ds, arch, method, len(rs), acc_mean, acc_std, steps_mean, steps_std,
                                   float(np.mean([r.wall_time for r in rs])), sp, t, dof, p, d))
    return reports


RESULTS_COLUMNS = [f.name for f in fields(StatsReport)]
PER_SEED_COLUMNS = [f.name for f in fields(RunResult)]
SERIES_COLUMNS = ["step", "pseudo_epoch", "grad_ratio", "aux_weight_norms"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _fmt_pm(mean, std, scale=1.0, digits=2) -> str:
    if mean is None:
        return "---"
    return f"{mean * scale:.{digits}f}+-{std * scale:.{digits}f}"


def render_text_table(reports: list[StatsReport]) -> str:
    header = ["Dataset", "Architecture", "Method", "n", "Val Acc (%)", "Steps", "Speedup (%)", "p", "d"]
    rows = []
    for r in reports:
        rows.append([
            r.dataset, r.arch, r.method, str(r.n),
            _fmt_pm(r.val_acc_mean, r.val_acc_std, 100.0),
            _fmt_pm(r.steps_mean, r.steps_std, digits=0),
            "---" if r.speedup_pct is None else f"{r.speedup_pct:+.1f}",
            "---" if r.p_value is None else f"{r.p_value:.4f}",
            "---" if r.cohens_d is None else f"{r.cohens_d:.2f} ({effect_size_label(r.cohens_d)})",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, columns: list[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _cell(row.get(k)) for k in columns})
    path.write_text(buf.getvalue())


def render_report(reports: list[StatsReport], runs: list[RunResult], out_dir,
                  series: dict[str, list[dict]] | None = None) -> dict[str, Path]:
    """Write results.txt/.csv, per_seed.txt/.csv and one gradient-ratio series CSV per method."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results_txt": out / "results.txt",
        "results_csv": out / "results.csv",
        "per_seed_txt": out / "per_seed.txt",
        "per_seed_csv": out / "per_seed.csv",
    }
    paths["results_txt"].write_text(render_text_table(reports))
    _write_csv(paths["results_csv"], RESULTS_COLUMNS, (vars(r) for r in reports))
    runs = sorted(runs, key=lambda r: (r.dataset, r.arch, r.method, r.seed))
    _write_csv(paths["per_seed_csv"], PER_SEED_COLUMNS, (vars(r) for r in runs))
    paths["per_seed_txt"].write_text(_per_seed_text(runs))
    for key, rows in (series or {}).items():
        p = out / f"grad_ratio_{key}.csv"
        _write_csv(p, SERIES_COLUMNS, rows)
        paths[f"series_{key}"] = p
    return paths


def _per_seed_text(runs: list[RunResult]) -> str:
    lines = ["dataset  arch  method  seed  val_acc(%)  steps_to_threshold"]
    for r in runs:
        acc = "---" if r.final_val_acc is None else f"{100 * r.final_val_acc:.2f}"
        st = "---" if r.steps_to_threshold is None else str(r.steps_to_threshold)
        lines.append(f"{r.dataset}  {r.arch}  {r.method}  {r.seed}  {acc}  {st}")
    return "\n".join(lines) + "\n"


def _parse(v: str, kind):
    if v == "":
        return None
    if kind is int:
        return int(v)
    if kind is float:
        return float(v)
    return v


def read_results_csv(path) -> list[StatsReport]:
    kinds = {f.name: f.type for f in fields(StatsReport)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = kinds[k]
                vals[k] = _parse(v, int if t in ("int", "int | None") else float if "float" in t else str)
            out.append(StatsReport(**vals))
    return out


def read_per_seed_csv(path) -> list[RunResult]:
    kinds = {f.name: f.type for f in fields(RunResult)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = kinds[k]
                vals[k] = _parse(v, int if t in ("int", "int | None") else float if "float" in t else str)
            out.append(RunResult(**vals))
    return out
