"""Acceptance gate: one check per primary criterion, at its stated tolerance.

Run under pytest (a summary section lists one PASS/FAIL line per
criterion) or directly with ``python tests/test_acceptance.py``.
Criterion 8's CIFAR-10 part needs the real archive under $DSLAB_DATA_DIR
and fails when it is absent; the stand-in rehearsal below exercises the
same pipeline on synthetic CIFAR-format files and is reported separately.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import sys
import tempfile
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from dslab import analysis as A
from dslab import config as C
from dslab import experiment, gradcheck, verify
from dslab.data import DATA_ENV, DataDirError, Normalizer, load_cifar10, make_synthetic_images, write_cifar10_tree
from dslab.initializers import LSUVSettings, hybrid_init, lsuv_init
from dslab.models import build_densenet_ds, build_mlp_ds, build_resnet_ds

ROOT = Path(__file__).resolve().parent.parent
DEMO = ROOT / "configs" / "demo.toml"
DESK = ROOT / "configs" / "cifar10_desk.toml"
SEEDS = (42, 123, 456)
SWEEP_METHODS = ("he", "lion-dg", "lsuv", "hybrid")

RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> None:
    RESULTS.append((name, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


# ------------------------------------------------------------------ checks


def check_1_decoupling() -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = verify.check_decoupling()
    secs = time.perf_counter() - t0
    zero = max(r.measured["max_abs_backbone_grad"] for r in results if not r.case.endswith("/he"))
    he = min(r.measured["max_abs_backbone_grad"] for r in results if r.case.endswith("/he"))
    ok = all(r.passed for r in results) and zero <= 1e-15 and he >= 1e-6 and secs < 30
    return ok, f"max |grad| LION-DG/Hybrid = {zero:.1e} (<= 1e-15), min He = {he:.2e} (>= 1e-6), {secs:.1f}s (< 30s)"


def check_2_growth() -> tuple[bool, str]:
    t0 = time.perf_counter()
    res = {r.case: r for r in verify.check_growth(lr=1e-3)}
    secs = time.perf_counter() - t0
    err = res["w_aux(1) = lr*C"].measured["abs_err"]
    r2 = res["linear fit t in [0,10]"].measured["r2"]
    ok = err <= 1e-10 and r2 >= 0.99 and secs < 10
    return ok, f"| |W_aux(1)| - lr*C | = {err:.1e} (<= 1e-10), R^2 = {r2:.6f} (>= 0.99), {secs:.1f}s (< 10s)"


def check_3_architecture() -> tuple[bool, str]:
    t0 = time.perf_counter()
    res = verify.check_architecture()
    secs = time.perf_counter() - t0
    side = max(r.measured["max_backbone_activation_diff"] for r in res if "perturb" in r.case)
    match = next(r.measured["max_jvp_diff"] for r in res if "zero-aux" in r.case)
    div = next(r.measured["max_jvp_diff"] for r in res if "nonzero-aux" in r.case)
    ok = side <= 1e-15 and match <= 1e-8 and div > 1e-6 and secs < 30
    return ok, (f"side-tap activation diff = {side:.1e} (<= 1e-15), on-path JVP diff zero aux = {match:.1e} "
                f"(<= 1e-8), nonzero aux = {div:.2e} (> 1e-6), {secs:.1f}s (< 30s)")


def check_4_gradcheck() -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = gradcheck.run(seeds=20)
    secs = time.perf_counter() - t0
    worst = gradcheck.worst_by_op(results)
    top = max(worst.values(), key=lambda r: r.max_rel_err)
    ok = set(worst) == set(gradcheck.OPS) and top.max_rel_err <= 1e-4 and secs < 60
    return ok, f"{len(worst)} ops x 20 seeds, worst rel err {top.max_rel_err:.2e} ({top.op}) (<= 1e-4), {secs:.1f}s (< 60s)"


def _calibration_images(n: int = 256) -> np.ndarray:
    train = make_synthetic_images(10, n // 10 + 1, seed=11)
    return Normalizer.fit(train)(train.inputs)[:n]


def check_5_lsuv() -> tuple[bool, str]:
    worst_dev, worst_iter, layers = 0.0, 0, 0
    cases = [(build_densenet_ds, lsuv_init), (build_resnet_ds, lsuv_init), (build_densenet_ds, hybrid_init),
             (build_mlp_ds, lsuv_init)]
    for builder, init in cases:
        model = builder()
        batch = _calibration_images() if builder is not build_mlp_ds else \
            np.random.default_rng(3).standard_normal((256, 16))
        report = init(model, batch, 0, LSUVSettings())
        # independent re-measurement: one forward pass over the same batch
        cap = {}
        model.train()
        model(batch, capture=cap)
        for c in report.layers:
            var = float(np.var(cap[c.layer].data))
            worst_dev = max(worst_dev, abs(var - 1.0), abs(c.variance - 1.0))
            worst_iter = max(worst_iter, c.iterations)
            layers += 1
    ok = worst_dev <= 0.01 and worst_iter <= 10 and layers > 0
    return ok, f"{layers} calibrated layers, max |var - 1| = {worst_dev:.2e} (<= 0.01), max iterations {worst_iter} (<= 10)"


def check_6_census() -> tuple[bool, str]:
    c = build_densenet_ds().census()
    got = (c.by_layer["stem.conv"], c.by_layer["aux1"], c.by_layer["aux2"], c.by_layer["main"],
           c.by_layer["transition1.conv"], c.by_layer["transition2.conv"])
    rel = (c.total - 77_000) / 77_000
    ok = got == (648, 720, 840, 960, 2628, 3570) and abs(rel) <= 0.10
    return ok, f"stem/aux1/aux2/main/trans1/trans2 = {got}, total {c.total} ({rel:+.2%} vs 77,000, within 10%)"


SEED_ACCURACY = {
    "he": ((79.71, 82.17, 81.45), 81.11),
    "lion-dg": ((80.19, 80.55, 81.04), 80.59),
    "lsuv": ((79.74, 78.91, 84.07), 80.91),
    "hybrid": ((81.01, 82.16, 82.58), 81.92),
}
SEED_STEPS = {"fixup": ((1283, 1089, 1302), 1225, 114), "rezero": ((1265, 1067, 1278), 1203, 116)}


def check_7a_accuracy_means() -> tuple[bool, str]:
    means = {m: A.aggregate(v)[0] for m, (v, _) in SEED_ACCURACY.items()}
    ok = all(abs(round(means[m], 2) - gold) <= 0.005 for m, (_, gold) in SEED_ACCURACY.items())
    return ok, "means " + ", ".join(f"{m} {means[m]:.4f}->{round(means[m], 2)}" for m in means)


def check_7b_steps_mean_std() -> tuple[bool, str]:
    parts, ok = [], True
    for m, (v, gold_mean, gold_std) in SEED_STEPS.items():
        mean, std = A.aggregate(v)
        good = abs(round(mean) - gold_mean) <= 1 and abs(round(std) - gold_std) <= 1
        ok &= good
        parts.append(f"{m} mean {mean:.2f} (gold {gold_mean}), std {std:.2f} (gold {gold_std})")
    return ok, "; ".join(parts) + " [sample std, n-1]"


def _mp_two_sided(t: float, dof: float) -> float:
    t, v = mpmath.mpf(t), mpmath.mpf(dof)
    return float(mpmath.betainc(v / 2, mpmath.mpf(1) / 2, 0, v / (v + t * t), regularized=True))


def _mp_cdf(t: float, dof: float) -> float:
    v = mpmath.mpf(dof)
    c = mpmath.gamma((v + 1) / 2) / (mpmath.sqrt(v * mpmath.pi) * mpmath.gamma(v / 2))
    tail = mpmath.quad(lambda x: c * (1 + x * x / v) ** (-(v + 1) / 2), [abs(mpmath.mpf(t)), mpmath.inf])
    return float(1 - tail) if t > 0 else float(tail)


def check_7c_oracle() -> tuple[bool, str]:
    mpmath.mp.dps = 50
    gen = np.random.default_rng(2024)
    worst_cdf = 0.0
    for _ in range(200):
        t, dof = gen.uniform(-30, 30), gen.uniform(0.5, 100)
        worst_cdf = max(worst_cdf, abs(A.student_t_cdf(t, dof) - _mp_cdf(t, dof)))
    worst_p = 0.0
    pairs = [(SEED_STEPS["fixup"][0], SEED_STEPS["rezero"][0]), ((0, 0, 0), (10, 10.001, 9.999))]
    pairs += [(tuple(gen.normal(0, 1, 3)), tuple(gen.normal(0.5, 2, 4))) for _ in range(50)]
    for a, b in pairs:
        w = A.welch_t(a, b)
        worst_p = max(worst_p, abs(w.p - _mp_two_sided(w.t, w.dof)))
    fr = A.welch_t(SEED_STEPS["fixup"][0], SEED_STEPS["rezero"][0])
    ok = worst_cdf <= 1e-6 and worst_p <= 1e-6 and fr.p > 0.5
    return ok, f"max |CDF err| = {worst_cdf:.1e}, max |p err| = {worst_p:.1e} (<= 1e-6); Fixup vs ReZero p = {fr.p:.4f} (> 0.5)"


def check_7d_cohens_d() -> tuple[bool, str]:
    d0 = A.cohens_d([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    d1 = A.cohens_d([11.0, 12.0, 13.0], [10.0, 11.0, 12.0])
    return d0 == 0.0 and d1 == 1.0, f"equal means d = {d0!r}, one pooled-std shift d = {d1!r}"


def _synthetic_speedup(out: Path) -> dict[str, list[int | None]]:
    cfg = C.load(DEMO)
    summaries = experiment.sweep(cfg, SEEDS, ("he", "lion-dg"), out)
    steps: dict[str, list[int | None]] = {"he": [], "lion-dg": []}
    for s in summaries:
        steps[s["method"]].append(s["steps_to_threshold"])
    return steps


def check_8a_synthetic(out: Path) -> tuple[bool, str]:
    steps = _synthetic_speedup(out)
    converged = all(v is not None for vs in steps.values() for v in vs)
    ok = converged and statistics.median(steps["lion-dg"]) <= statistics.median(steps["he"])
    return ok, (f"steps-to-70% He {steps['he']} (median {statistics.median(steps['he']) if converged else '-'}), "
                f"LION-DG {steps['lion-dg']} (median {statistics.median(steps['lion-dg']) if converged else '-'})")


def _sweep_shape(cfg: C.RunConfig, out: Path, methods=SWEEP_METHODS) -> tuple[bool, str]:
    summaries = experiment.sweep(cfg, SEEDS, methods, out)
    experiment.report(out, summaries, methods, SEEDS)
    rows = A.read_results_csv(out / "results.csv")
    per_seed = A.read_per_seed_csv(out / "per_seed.csv")
    shape_ok = len(rows) == len(methods) and len(per_seed) == len(methods) * len(SEEDS) and \
        all((out / f"grad_ratio_{m}.csv").is_file() for m in methods) and (out / "results.txt").is_file()
    series = experiment.ratio_series(out, "lion-dg", SEEDS)[:10]
    lion_curve = [r["grad_ratio"] for r in series]
    monotone = len(lion_curve) == 10 and all(b > a for a, b in zip(lion_curve, lion_curve[1:]))
    he_r0 = []
    for seed in SEEDS:
        recs, _ = experiment.read_metrics(experiment.run_dir(out, "he", seed) / experiment.METRICS)
        he_r0.append(next(r["grad_ratio"] for r in recs if r.get("grad_ratio") is not None))
    ok = shape_ok and monotone and min(he_r0) > 0
    detail = (f"report rows {len(rows)}, per-seed rows {len(per_seed)}; LION-DG mean r(t) first 10 points "
              f"{'increasing' if monotone else 'NOT increasing'} {[round(v, 3) for v in lion_curve]}; "
              f"He r(0) per seed {[round(v, 3) for v in he_r0]}")
    return ok, detail


def check_8b_cifar(out: Path) -> tuple[bool, str]:
    t0 = time.perf_counter()
    cfg = C.load(DESK)
    try:
        load_cifar10(cfg.data.dir)
    except DataDirError as e:
        return False, f"CIFAR-10 not available ({e}); set {DATA_ENV} to the binary archive to run this check"
    ok, detail = _sweep_shape(cfg, out)
    secs = time.perf_counter() - t0
    return ok and secs <= 1800, f"{detail}; {secs / 60:.1f} min (<= 30 min)"


def check_8_rehearsal(out: Path) -> tuple[bool, str]:
    data_dir = out / "data"
    write_cifar10_tree(make_synthetic_images(10, 100, seed=0), make_synthetic_images(10, 20, seed=0, split="val"),
                       data_dir)
    cfg = C.load(DESK)
    cfg = cfg.replace("data", dir=str(data_dir), subset=None, val_subset=None)
    cfg = cfg.replace("train", batch_size=32, max_steps=50)
    return _sweep_shape(cfg, out / "runs")


def check_9_determinism(out: Path) -> tuple[bool, str]:
    first = _synthetic_speedup(out / "a")
    second = _synthetic_speedup(out / "b")
    g1 = [r.max_rel_err for r in gradcheck.run(seeds=3)]
    g2 = [r.max_rel_err for r in gradcheck.run(seeds=3)]
    v1 = [r.measured for r in verify.check_growth()]
    v2 = [r.measured for r in verify.check_growth()]
    s1 = (A.aggregate(SEED_STEPS["fixup"][0]), A.welch_t(SEED_STEPS["fixup"][0], SEED_STEPS["rezero"][0]))
    s2 = (A.aggregate(SEED_STEPS["fixup"][0]), A.welch_t(SEED_STEPS["fixup"][0], SEED_STEPS["rezero"][0]))
    # one short DenseNet run twice: every logged value must repeat bitwise
    data_dir = out / "data"
    write_cifar10_tree(make_synthetic_images(10, 30, seed=1), make_synthetic_images(10, 5, seed=1, split="val"),
                       data_dir)
    cfg = C.load(DESK).replace("data", dir=str(data_dir), subset=None, val_subset=None)
    cfg = cfg.replace("train", batch_size=16, max_steps=6, ratio_every=2, log_every=1)
    logs = []
    for tag in ("x", "y"):
        experiment.run(cfg, out / tag)
        recs, summary = experiment.read_metrics(out / tag / experiment.METRICS)
        summary.pop("wall_time")
        logs.append((recs, summary))
    ok = first == second and g1 == g2 and v1 == v2 and s1 == s2 and logs[0] == logs[1]
    return ok, (f"synthetic steps-to-threshold repeat {first == second} {first}; gradcheck, growth, stats goldens "
                f"repeat {g1 == g2 and v1 == v2 and s1 == s2}; DenseNet metrics stream repeats {logs[0] == logs[1]}")


# ------------------------------------------------------------------ pytest


def _gate(name: str, result: tuple[bool, str]) -> None:
    ok, detail = result
    record(name, ok, detail)
    assert ok, f"{name}: {detail}"


def test_criterion_1_gradient_decoupling():
    _gate("1 gradient decoupling", check_1_decoupling())


def test_criterion_2_linear_growth():
    _gate("2 linear aux growth", check_2_growth())


def test_criterion_3_architecture_dependence():
    _gate("3 architecture dependence", check_3_architecture())


def test_criterion_4_autodiff_soundness():
    _gate("4 autodiff soundness", check_4_gradcheck())


def test_criterion_5_lsuv_contract():
    _gate("5 LSUV contract", check_5_lsuv())


def test_criterion_6_parameter_census():
    _gate("6 parameter-count goldens", check_6_census())


def test_criterion_7a_accuracy_means():
    _gate("7a statistics: per-seed accuracy means", check_7a_accuracy_means())


def test_criterion_7b_steps_mean_and_std():
    _gate("7b statistics: Fixup/ReZero steps mean and std", check_7b_steps_mean_std())


def test_criterion_7c_t_oracle():
    _gate("7c statistics: t-CDF and Welch p vs 50-digit oracle", check_7c_oracle())


def test_criterion_7d_cohens_d():
    _gate("7d statistics: Cohen's d constructions", check_7d_cohens_d())


def test_criterion_8a_synthetic_speedup_direction(tmp_path):
    _gate("8a speedup direction (synthetic MLP-DS)", check_8a_synthetic(tmp_path))


def test_criterion_8b_cifar10_desk_sweep(tmp_path):
    _gate("8b CIFAR-10 desk sweep", check_8b_cifar(tmp_path))


def test_rehearsal_8_standin_cifar_sweep(tmp_path):
    _gate("8 rehearsal on stand-in CIFAR-format data (not a criterion)", check_8_rehearsal(tmp_path))


def test_criterion_9_determinism(tmp_path):
    _gate("9 determinism", check_9_determinism(tmp_path))


# ------------------------------------------------------------------ script

CHECKS = [
    ("1 gradient decoupling", check_1_decoupling, False),
    ("2 linear aux growth", check_2_growth, False),
    ("3 architecture dependence", check_3_architecture, False),
    ("4 autodiff soundness", check_4_gradcheck, False),
    ("5 LSUV contract", check_5_lsuv, False),
    ("6 parameter-count goldens", check_6_census, False),
    ("7a statistics: per-seed accuracy means", check_7a_accuracy_means, False),
    ("7b statistics: Fixup/ReZero steps mean and std", check_7b_steps_mean_std, False),
    ("7c statistics: t-CDF and Welch p vs 50-digit oracle", check_7c_oracle, False),
    ("7d statistics: Cohen's d constructions", check_7d_cohens_d, False),
    ("8a speedup direction (synthetic MLP-DS)", check_8a_synthetic, True),
    ("8b CIFAR-10 desk sweep", check_8b_cifar, True),
    ("8 rehearsal on stand-in CIFAR-format data (not a criterion)", check_8_rehearsal, True),
    ("9 determinism", check_9_determinism, True),
]


def main() -> int:
    failed = 0
    with tempfile.TemporaryDirectory() as tmp:
        for i, (name, fn, needs_dir) in enumerate(CHECKS):
            d = Path(tmp) / f"c{i}"
            d.mkdir()
            ok, detail = fn(d) if needs_dir else fn()
            record(name, ok, detail)
            failed += not ok
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
