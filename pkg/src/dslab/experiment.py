"""One training run from a resolved config: data, model, init, train, files.

A run directory holds ``resolved_config.json`` (enough to reproduce the
run on its own), ``metrics.jsonl`` (one JSON object per logged step, then
a summary object) and ``summary.json``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import rng
from .analysis import RunResult, build_reports, render_report
from .config import RunConfig, dump_json
from .data import Dataset, Normalizer, load_dataset, subset_per_class
from .initializers import apply_scheme, build_flags
from .models import ModelGraph, build_model
from .training import PSEUDO_EPOCH_STEPS, TrainingDiverged, train

RESOLVED = "resolved_config.json"
METRICS = "metrics.jsonl"
SUMMARY = "summary.json"


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    return v


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    train_set, val_set = load_dataset(d.source, d.dir, d.subset, d.classes, d.dim, d.n, d.seed, d.spread)
    if d.val_subset:
        val_set = subset_per_class(val_set, d.val_subset)
    return train_set, val_set


def calibration_batch(train_set: Dataset, normalizer: Normalizer | None, samples: int, seed: int) -> np.ndarray:
    """A seeded draw of ``samples`` normalized training inputs for data-driven init."""
    if len(train_set) < samples:
        raise ValueError(f"calibration needs {samples} training samples, dataset has {len(train_set)}")
    idx = rng.stream(seed, "init.calibration").permutation(len(train_set))[:samples]
    x = train_set.inputs[np.sort(idx)]
    return normalizer(x) if normalizer is not None else x


def build(cfg: RunConfig, train_set: Dataset, normalizer: Normalizer | None) -> tuple[ModelGraph, dict]:
    m = cfg.model
    if m.classes != train_set.class_count:
        raise ValueError(f"model.classes={m.classes} but the data has {train_set.class_count} classes")
    flags = build_flags(cfg.init.scheme)
    input_dim = train_set.inputs.shape[1] if m.arch == "mlp" else m.input_dim
    model = build_model(m.arch, m.classes, m.variant, input_dim, tuple(m.hidden_dims), **flags)
    calib = None
    if cfg.init.scheme in ("lsuv", "hybrid"):
        calib = calibration_batch(train_set, normalizer, cfg.init.lsuv_samples, cfg.init.seed)
    report = apply_scheme(model, cfg.init.scheme, cfg.init.seed, calib, cfg.init.lsuv())
    info = {
        "arch_kind": model.arch_kind,
        "parameters": model.census().total,
        "init_notices": report.notices,
        "calibration": [vars(c) for c in report.layers],
    }
    return model, info


def run(cfg: RunConfig, out_dir) -> dict:
    """Execute one run, writing its files into ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg, out / RESOLVED)
    train_set, val_set = load_data(cfg)
    normalizer = Normalizer.fit(train_set) if train_set.is_image else None
    model, info = build(cfg, train_set, normalizer)

    with open(out / METRICS, "w") as fh:
        def emit(rec):
            fh.write(json.dumps(_json_safe(rec.to_dict()), allow_nan=False) + "\n")

        diverged = None
        try:
            metrics = train(model, train_set, cfg.train, cfg.init.seed, val=val_set,
                            normalizer=normalizer, on_record=emit)
        except TrainingDiverged as e:
            metrics, diverged = e.metrics, e.step
        summary = metrics.summary()
        summary.update({
            "dataset": cfg.data.source,
            "arch": info["arch_kind"],
            "method": cfg.init.scheme,
            "seed": cfg.init.seed,
            "config_hash": cfg.digest(),
            "diverged_at": diverged,
            **info,
        })
        fh.write(json.dumps(_json_safe(summary), allow_nan=False) + "\n")
    (out / SUMMARY).write_text(json.dumps(_json_safe(summary), indent=2) + "\n")
    return summary


def read_metrics(path) -> tuple[list[dict], dict | None]:
    steps, summary = [], None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("record") == "summary":
                summary = rec
            else:
                steps.append(rec)
    return steps, summary


# ------------------------------------------------------------------ sweeps


def run_dir(root, method: str, seed: int) -> Path:
    return Path(root) / method / f"seed{seed}"


def completed(directory, digest: str) -> dict | None:
    """The stored summary when ``directory`` holds a finished run of the config with ``digest``."""
    path = Path(directory) / SUMMARY
    if not path.is_file():
        return None
    try:
        summary = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    return summary if summary.get("config_hash") == digest else None


def _run_job(job: tuple[dict, str]) -> dict:
    raw, out = job
    from .config import from_dict

    return run(from_dict(raw), out)


def sweep(cfg: RunConfig, seeds, methods, out_dir, jobs: int = 1, log=None) -> list[dict]:
    """One run per (method, seed) under ``out_dir/<method>/seed<seed>``; finished runs are skipped."""
    pending, summaries = [], {}
    for method in methods:
        for seed in seeds:
            c = cfg.replace("init", scheme=method, seed=seed)
            d = run_dir(out_dir, method, seed)
            done = completed(d, c.digest())
            if done is not None:
                summaries[(method, seed)] = done
                if log:
                    log(f"skip {method} seed {seed} (complete)")
            else:
                pending.append(((method, seed), c, d))
    if jobs > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(_run_job, (c.to_dict(), str(d))) for key, c, d in pending}
            for key, fut in futures.items():
                summaries[key] = fut.result()
                if log:
                    log(f"done {key[0]} seed {key[1]}")
    else:
        for key, c, d in pending:
            summaries[key] = run(c, d)
            if log:
                log(f"done {key[0]} seed {key[1]}")
    return [summaries[(m, s)] for m in methods for s in seeds]


def ratio_series(root, method: str, seeds) -> list[dict]:
    """Seed-averaged gradient ratio and aux weight norms per logged ratio step."""
    by_step: dict[int, list[dict]] = {}
    for seed in seeds:
        steps, _ = read_metrics(run_dir(root, method, seed) / METRICS)
        for rec in steps:
            if rec.get("grad_ratio") is not None:
                by_step.setdefault(rec["step"], []).append(rec)
    rows = []
    for step in sorted(by_step):
        recs = by_step[step]
        ratios = [float(r["grad_ratio"]) for r in recs]
        norms = np.mean([r["aux_weight_norms"] for r in recs], axis=0)
        rows.append({
            "step": step,
            "pseudo_epoch": step / PSEUDO_EPOCH_STEPS,
            "grad_ratio": float(np.mean(ratios)),
            "aux_weight_norms": ";".join(repr(float(v)) for v in np.atleast_1d(norms)),
        })
    return rows


def report(root, summaries: list[dict], methods, seeds, baseline: str = "he") -> dict[str, Path]:
    runs = [
        RunResult(s["dataset"], s["arch"], s["method"], s["seed"], s.get("final_val_acc"),
                  s.get("steps_to_threshold"), s["steps_run"], s["wall_time"])
        for s in summaries
    ]
    reports = build_reports(runs, baseline)
    order = {m: i for i, m in enumerate(methods)}
    reports.sort(key=lambda r: (r.dataset, r.arch, order.get(r.method, len(order))))
    series = {m: ratio_series(root, m, seeds) for m in methods}
    return render_report(reports, runs, root, series)
