"""Acceptance criteria C1-C10.

Each test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so the report is complete even when a criterion fails.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy import signal, stats

from peerexposure.pipeline import (
    MarketData,
    RunConfig,
    evaluation_months,
    run_series,
    trend_from_points,
    write_outputs,
)
from peerexposure.regression import HacOptions, coef_test, hac_covariance, ols_fit
from peerexposure.screening import estimate_pi0, pairwise_delta_fit
from peerexposure.synthetic import SimSpec, paper_scale_spec, simulate

FACTORS = ("MKT", "SMB", "HML", "RMW", "CMA", "MOM")


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def qs(x):
    if x == 0:
        return 1.0
    z = 6 * math.pi * x / 5
    return 25 / (12 * math.pi**2 * x**2) * (math.sin(z) / z - math.cos(z))


# ---------------------------------------------------------------------------
# C1 dates
# ---------------------------------------------------------------------------


def test_c1_evaluation_date_counts(acceptance_report):
    want = {"2020-09": 81, "2020-06": 79, "2019-12": 72}
    with Timer() as t:
        got = {end: len(evaluation_months("2014-01", end)) for end in want}
    ok = got == want and t.seconds < 1
    acceptance_report("C1 date arithmetic", ok, f"expected {want}, got {got}")
    assert ok, got


# ---------------------------------------------------------------------------
# C2-C4 HAC and tests
# ---------------------------------------------------------------------------


def test_c2_hac_brute_force(acceptance_report):
    rng = np.random.default_rng(2)
    T, bw = 50, 4.0
    X = np.column_stack([np.ones(T), rng.normal(size=(T, 3))])
    e = signal.lfilter([1.0], [1.0, -0.5], rng.normal(size=T))
    with Timer() as t:
        fit = ols_fit(X @ [0.2, 1.0, -1.0, 0.5] + e, X)
        got = hac_covariance(fit, X, HacOptions(prewhiten=False, bandwidth=bw, df_adjust=False))
        lag0 = hac_covariance(fit, X, HacOptions(prewhiten=False, bandwidth=0.0, df_adjust=False))
    v = X * fit.resid[:, None]
    omega = np.zeros((4, 4))
    for s in range(T):
        for u in range(T):
            omega += qs((s - u) / bw) * np.outer(v[s], v[u])
    Q = np.linalg.inv(X.T @ X)
    brute = Q @ omega @ Q
    sandwich = Q @ (v.T @ v) @ Q
    rel = np.abs(got - brute).max() / np.abs(brute).max()
    rel0 = np.abs(lag0 - sandwich).max() / np.abs(sandwich).max()
    ok = rel <= 1e-10 and rel0 <= 1e-10 and t.seconds < 1
    acceptance_report("C2 HAC vs brute force", ok, f"rel err {rel:.1e} (bw=4), {rel0:.1e} (bw=0)")
    assert ok


def test_c3_hac_coverage(acceptance_report):
    T, reps, beta = 500, 1000, 0.5
    hits = 0
    with Timer() as t:
        for s in range(reps):
            r = np.random.default_rng(1000 + s)
            x = signal.lfilter([1.0], [1.0, -0.5], r.normal(size=T))
            e = signal.lfilter([1.0], [1.0, -0.5], r.normal(size=T))
            X = np.column_stack([np.ones(T), x])
            fit = ols_fit(1.0 + beta * x + e, X)
            res = coef_test(fit, hac_covariance(fit, X), 1)
            hits += abs(res.estimate - beta) <= 1.959964 * res.se
    cov = hits / reps
    ok = 0.90 <= cov <= 0.97 and t.seconds <= 120
    acceptance_report("C3 HAC coverage", ok, f"95% CI coverage {cov:.3f} over {reps} reps, {t.seconds:.0f}s")
    assert ok


def test_c4_null_pvalue_uniformity(acceptance_report):
    ps = []
    with Timer() as t:
        for s in range(1000):
            r = np.random.default_rng(5000 + s)
            F = r.normal(0, 0.01, (252, 6)) * [1, 0.5, 0.5, 0.5, 0.5, 0.5]
            common = F @ [1.0, 0.2, 0.0, 0.0, 0.0, 0.0]
            ri = common + r.normal(0, 0.02, 252)
            rj = common + r.normal(0, 0.02, 252)
            ps.append(pairwise_delta_fit(ri, rj, F)[0].pvalue)
    ks = stats.kstest(ps, "uniform")
    ok = ks.pvalue > 0.01 and t.seconds <= 120
    acceptance_report("C4 null p-value uniformity", ok, f"KS p={ks.pvalue:.3f} on 1000 MKT tests, {t.seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# C5 pi0 recovery
# ---------------------------------------------------------------------------


def test_c5_pi0_recovery(acceptance_report):
    with Timer() as t:
        uni = estimate_pi0(np.random.default_rng(55).uniform(size=1000), seed=55).pi0
        hits = 0
        for s in range(200):
            r = np.random.default_rng(s)
            null = r.random(1000) < 0.7
            p = np.where(null, r.uniform(size=1000), r.beta(0.05, 5, size=1000))
            hits += 0.6 <= estimate_pi0(p, seed=s).pi0 <= 0.8
    ok = 0.9 <= uni <= 1.0 and hits >= 190 and t.seconds <= 60
    acceptance_report("C5 pi0 recovery", ok, f"(a) uniform pi0={uni:.3f}; (b) {hits}/200 seeds in [0.6, 0.8]")
    assert ok


# ---------------------------------------------------------------------------
# C6-C7 end to end
# ---------------------------------------------------------------------------

N_STOCKS, N_MONTHS, SEED = 80, 53, 606


def end_to_end(betas):
    spec = SimSpec(n_stocks=N_STOCKS, n_months=N_MONTHS, betas=betas, seed=SEED)
    panel, factors, ghg, truth = simulate(spec)
    cfg = RunConfig(horizons=(3,), seed=1)
    result = run_series(cfg, MarketData.from_parts(panel, factors, ghg))
    out = {}
    for u in ("brown", "green"):
        entries = result.series[(u, 3)]
        assert len(entries) == 50
        out[u] = np.nanmean([e.heterogeneity for e in entries], axis=0)
    return out, truth


@pytest.fixture(scope="module")
def null_run():
    betas = np.tile([1.0, 0.0, 0.0, 0.0, 0.0, 0.0], (N_STOCKS, 1))
    with Timer() as t:
        out, truth = end_to_end(betas)
    return out, truth, t.seconds


def test_c6_end_to_end_null(null_run, acceptance_report):
    out, truth, secs = null_run
    assert len(truth.groups["green"]) == 20
    worst = max(out["brown"].max(), out["green"].max())
    ok = worst <= 0.15 and secs <= 300
    detail = (
        f"max mean heterogeneity {worst:.3f} (bound 0.15); "
        f"green {np.round(out['green'], 3).tolist()}, brown {np.round(out['brown'], 3).tolist()}, {secs:.0f}s"
    )
    acceptance_report("C6 end-to-end null", ok, detail)
    assert ok, detail


def test_c7_end_to_end_separation(null_run, acceptance_report):
    null, truth, _ = null_run
    betas = np.tile([1.0, 0.0, 0.0, 0.0, 0.0, 0.0], (N_STOCKS, 1))
    brown = [truth.stocks.index(s) for s in truth.groups["brown"]]
    betas[brown[:10], 0] = 0.5
    betas[brown[10:], 0] = 1.5
    with Timer() as t:
        sep, _ = end_to_end(betas)
    gap = sep["brown"][0] - null["brown"][0]
    band = (null["brown"].min() - 0.05, null["brown"].max() + 0.05)
    others = sep["brown"][1:]
    inside = bool(((others >= band[0]) & (others <= band[1])).all())
    ok = gap >= 0.25 and inside and t.seconds <= 300
    detail = (
        f"MKT gap {gap:.3f} (need 0.25); other factors {np.round(others, 3).tolist()} "
        f"in null band [{band[0]:.3f}, {band[1]:.3f}]: {inside}, {t.seconds:.0f}s"
    )
    acceptance_report("C7 end-to-end separation", ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# C8 determinism at paper scale
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c8_paper_scale_determinism(tmp_path, acceptance_report):
    spec = paper_scale_spec(seed=8, n_months=84)
    panel, factors, ghg, truth = simulate(spec)
    data = MarketData.from_parts(panel, factors, ghg)
    outputs = []
    with Timer() as t:
        for threads in (1, 4):
            cfg = RunConfig(horizons=(3,), seed=8, threads=threads)
            result = run_series(cfg, data)
            outputs.append(write_outputs(result, tmp_path / f"t{threads}"))
    n_months = len(result.months[3])
    same = all(outputs[0][k].read_bytes() == outputs[1][k].read_bytes() for k in outputs[0])
    ok = same and n_months == 81 and len(truth.groups["brown"]) == 125 and t.seconds <= 1800
    detail = f"byte-identical={same}, {n_months} months x 2 groups of 125, two runs in {t.seconds / 60:.1f} min"
    acceptance_report("C8 determinism at scale", ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# C9 report structure
# ---------------------------------------------------------------------------


def test_c9_report_structure(tmp_path, acceptance_report):
    spec = SimSpec(n_stocks=40, n_months=16, beta_sd=0.3, seed=9)
    panel, factors, ghg, _ = simulate(spec)
    with Timer() as t:
        result = run_series(RunConfig(bootstrap_reps=20), MarketData.from_parts(panel, factors, ghg))
    paths = write_outputs(result, tmp_path)

    with open(paths["heterogeneity_summary"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    keys = {(r["universe"], int(r["horizon_months"]), r["factor"]) for r in rows}
    want_keys = {(u, h, f) for u in ("brown", "green") for h in (3, 6, 12) for f in FACTORS}
    stats_cols = {"average", "sd", "min", "max"} <= set(rows[0])
    table2 = keys == want_keys and len(rows) == 36 and stats_cols
    for r in rows:
        table2 &= float(r["min"]) <= float(r["average"]) <= float(r["max"]) and float(r["sd"]) >= 0

    with open(paths["exposure_summary"], newline="") as fh:
        exp = list(csv.DictReader(fh))
    table1 = (
        list(exp[0]) == ["universe", "horizon_months", "factor", "p10", "p50", "p90", "share_significant"]
        and {(r["universe"], int(r["horizon_months"]), r["factor"]) for r in exp} == want_keys
        and result.config.significance == 0.05
    )
    for r in exp:
        table1 &= float(r["p10"]) <= float(r["p50"]) <= float(r["p90"]) and 0 <= float(r["share_significant"]) <= 1
    ok = bool(table2 and table1) and t.seconds < 60
    acceptance_report(
        "C9 report structure", ok, f"summary 6 factors x 4 stats x 2 universes x 3 horizons: {table2}; exposure: {table1}"
    )
    assert ok


# ---------------------------------------------------------------------------
# C10 trend
# ---------------------------------------------------------------------------


def test_c10_trend(acceptance_report):
    with Timer() as t:
        m = np.arange(72.0)
        exact = trend_from_points(m, 0.3 + 0.01 * m)
        err = abs(exact.slope - 0.01)
        hits = 0
        for s in range(200):
            e = signal.lfilter([1.0], [1.0, -0.5], np.random.default_rng(700 + s).normal(0, 0.02, 72))
            fit = trend_from_points(m, 0.3 + 0.005 * m + e)
            hits += abs(fit.slope - 0.005) <= 3 * fit.slope_se
    ok = err <= 1e-12 and hits >= 190 and t.seconds <= 60
    acceptance_report("C10 trend fit", ok, f"exact-line slope error {err:.1e}; {hits}/200 within 3 HAC SE")
    assert ok
