from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dslab import analysis as A

mpmath.mp.dps = 50

SEED_ACCURACY = {
    "he": (79.71, 82.17, 81.45),
    "lion-dg": (80.19, 80.55, 81.04),
    "lsuv": (79.74, 78.91, 84.07),
    "hybrid": (81.01, 82.16, 82.58),
}


def mp_t_cdf(t, dof):
    """Student-t CDF by direct quadrature of the density at 50 digits."""
    t, v = mpmath.mpf(t), mpmath.mpf(dof)
    c = mpmath.gamma((v + 1) / 2) / (mpmath.sqrt(v * mpmath.pi) * mpmath.gamma(v / 2))
    f = lambda x: c * (1 + x * x / v) ** (-(v + 1) / 2)  # noqa: E731
    tail = mpmath.quad(f, [abs(t), mpmath.inf])
    return float(1 - tail) if t > 0 else float(tail)


def mp_welch(a, b):
    a = [mpmath.mpf(x) for x in a]
    b = [mpmath.mpf(x) for x in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((x - ma) ** 2 for x in a) / (len(a) - 1) / len(a)
    vb = sum((x - mb) ** 2 for x in b) / (len(b) - 1) / len(b)
    t = (ma - mb) / mpmath.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    tail = mpmath.betainc(dof / 2, mpmath.mpf(1) / 2, 0, dof / (dof + t * t), regularized=True)
    return float(t), float(dof), float(tail)


@pytest.mark.parametrize("t,dof", [(0.0, 3), (0.5, 2.3), (-3.0, 4.7), (10.0, 1.5), (2.1, 30), (-0.01, 1.0),
                                   (1.96, 1000), (-25.0, 3.2), (4.0, 0.7)])
def test_t_cdf_matches_high_precision_oracle(t, dof):
    assert A.student_t_cdf(t, dof) == pytest.approx(mp_t_cdf(t, dof), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(-40, 40), st.floats(0.5, 200))
def test_t_cdf_property_oracle(t, dof):
    assert abs(A.student_t_cdf(t, dof) - mp_t_cdf(t, dof)) <= 1e-6


def test_betainc_against_mpmath():
    for a, b, x in [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (15.0, 0.5, 0.99), (1.0, 1.0, 0.25)]:
        ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
        assert A.betainc(a, b, x) == pytest.approx(ref, abs=1e-12)


FIXUP = (1283, 1089, 1302)
REZERO = (1265, 1067, 1278)
# Pinned from the 50-digit oracle above (mp_welch).
FIXUP_VS_REZERO = (0.22130892345997547, 3.999960139813744, 0.8356905410187708)


def test_fixup_vs_rezero_pinned_against_oracle():
    w = A.welch_t(FIXUP, REZERO)
    t, dof, p = mp_welch(FIXUP, REZERO)
    assert (w.t, w.dof, w.p) == pytest.approx((t, dof, p), abs=1e-6)
    assert (w.t, w.dof, w.p) == pytest.approx(FIXUP_VS_REZERO, abs=1e-6)
    assert w.p > 0.5


def test_shifted_groups_are_significant():
    w = A.welch_t([0, 0, 0], [10, 10.001, 9.999])
    assert w.p < 0.01
    assert w.p == pytest.approx(mp_welch([0, 0, 0], [10, 10.001, 9.999])[2], abs=1e-6)


def test_identical_groups():
    w = A.welch_t([1, 2, 3], [1, 2, 3])
    assert w.t == 0 and w.p == 1


def test_degenerate_zero_variance():
    assert A.welch_t([5, 5], [5, 5]).p == 1.0
    w = A.welch_t([5, 5], [6, 6])
    assert w.p == 0.0 and w.t == -math.inf
    with pytest.raises(ValueError):
        A.welch_t([1], [1, 2])


def test_aggregate_seed_accuracy_means():
    expected = {"he": 81.11, "lion-dg": 80.59, "lsuv": 80.91, "hybrid": 81.92}
    for method, seeds in SEED_ACCURACY.items():
        mean, _ = A.aggregate(seeds)
        assert abs(round(mean, 2) - expected[method]) <= 0.005


def test_aggregate_conventions():
    # sample std (n-1) by default; ddof=0 reproduces the population spreads
    _, s1 = A.aggregate(SEED_ACCURACY["he"])
    _, s0 = A.aggregate(SEED_ACCURACY["he"], ddof=0)
    assert s1 == pytest.approx(1.2648, abs=1e-4)
    assert [round(A.aggregate(v, ddof=0)[1], 2) for v in SEED_ACCURACY.values()] == [1.03, 0.35, 2.26, 0.66]
    assert s0 < s1
    assert A.aggregate([3.0]) == (3.0, 0.0)
    with pytest.raises(ValueError):
        A.aggregate([])


def test_aggregate_seed_steps_values():
    mean, std = A.aggregate(FIXUP)
    assert round(mean) == 1225
    assert std == pytest.approx(117.874, abs=1e-3)
    mean, std = A.aggregate(REZERO)
    assert round(mean) == 1203
    assert std == pytest.approx(118.247, abs=1e-3)


def test_cohens_d_constructions():
    assert A.cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    # both groups have sample std 1, means one unit apart
    assert A.cohens_d([11, 12, 13], [10, 11, 12]) == 1.0
    assert A.cohens_d([5, 5], [4, 4]) == math.inf
    assert A.cohens_d([5, 5], [5, 5]) == 0.0


def test_effect_size_bands():
    assert [A.effect_size_label(d) for d in (0.1, 0.2, 0.5, 0.8, -1.4)] == [
        "negligible", "small", "medium", "large", "large"]


def test_speedup():
    assert A.speedup_percent(1000, 800) == pytest.approx(20.0)
    assert A.speedup_percent(None, 800) is None
    assert A.speedup_percent(1000, None) is None


groups = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=6)


@settings(max_examples=80, deadline=None)
@given(groups, groups)
def test_welch_symmetry(a, b):
    assume(np.var(a) + np.var(b) > 1e-6)
    w1, w2 = A.welch_t(a, b), A.welch_t(b, a)
    assert w1.t == pytest.approx(-w2.t, rel=1e-12, abs=1e-12)
    assert w1.p == pytest.approx(w2.p, rel=1e-12, abs=1e-15)
    assert 0.0 <= w1.p <= 1.0


@settings(max_examples=80, deadline=None)
@given(groups, groups, st.floats(0.01, 100))
def test_scale_equivariance(a, b, c):
    assume(np.var(a) > 1e-3 and np.var(b) > 1e-3)
    w1 = A.welch_t(a, b)
    w2 = A.welch_t([c * x for x in a], [c * x for x in b])
    assert w2.t == pytest.approx(w1.t, rel=1e-9, abs=1e-9)
    assert w2.p == pytest.approx(w1.p, rel=1e-7, abs=1e-12)
    assert A.cohens_d([c * x for x in a], [c * x for x in b]) == pytest.approx(A.cohens_d(a, b), rel=1e-9, abs=1e-9)


def _runs():
    out = []
    steps = {"he": (130, 120, 140), "lion-dg": (100, 110, 105), "lsuv": (None, 150, 160)}
    for method, ss in steps.items():
        for seed, s in zip((42, 123, 456), ss):
            out.append(A.RunResult("cifar10", "DenseNetDS", method, seed, 0.5 + seed / 1e4, s, 200, 1.5))
    return out


def test_build_reports():
    reports = {r.method: r for r in A.build_reports(_runs())}
    he, lion, lsuv = reports["he"], reports["lion-dg"], reports["lsuv"]
    assert he.speedup_pct is None and he.p_value is None
    assert lion.steps_mean == 105 and lion.speedup_pct == pytest.approx((130 - 105) / 130 * 100)
    w = A.welch_t([130, 120, 140], [100, 110, 105])
    assert lion.p_value == w.p and lion.cohens_d == A.cohens_d([130, 120, 140], [100, 110, 105])
    assert lsuv.steps_mean is None and lsuv.speedup_pct is None
    assert lsuv.n == 3


def test_render_report_files_and_round_trip(tmp_path):
    runs = _runs()
    reports = A.build_reports(runs)
    series = {"lion-dg": [{"step": 0, "pseudo_epoch": 0.0, "grad_ratio": 0.0, "aux_weight_norms": "0.0;0.0"}]}
    paths = A.render_report(reports, runs, tmp_path, series)
    assert A.read_results_csv(paths["results_csv"]) == reports
    assert sorted(A.read_per_seed_csv(paths["per_seed_csv"]), key=lambda r: (r.method, r.seed)) == \
        sorted(runs, key=lambda r: (r.method, r.seed))
    text = paths["results_txt"].read_text()
    assert "---" in text and "lion-dg" in text
    assert len(text.strip().splitlines()) == 2 + 3
    assert (tmp_path / "grad_ratio_lion-dg.csv").read_text().startswith("step,pseudo_epoch,grad_ratio")


def test_render_report_empty_input_gives_headers(tmp_path):
    paths = A.render_report([], [], tmp_path)
    assert paths["results_csv"].read_text().strip() == ",".join(A.RESULTS_COLUMNS)
    assert paths["per_seed_csv"].read_text().strip() == ",".join(A.PER_SEED_COLUMNS)
    assert len(paths["results_txt"].read_text().strip().splitlines()) == 2
