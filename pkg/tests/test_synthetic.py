import json

import numpy as np
import pytest

from peerexposure.market_data import load_factors, load_ghg, load_returns
from peerexposure.regression import ols_fit
from peerexposure.synthetic import (
    GroundTruth,
    SimSpec,
    block_betas,
    oracle_pi0,
    paper_scale_spec,
    simulate,
    write_simulation,
)


def test_noiseless_recovery():
    spec = SimSpec(n_stocks=10, n_months=3, beta_sd=0.5, idio_vol=0.0, seed=3)
    panel, factors, _, truth = simulate(spec)
    X = factors.design()
    for j in range(10):
        fit = ols_fit(panel.values[:, j], X)
        np.testing.assert_allclose(fit.coef[1:], truth.betas[j], atol=1e-12)
        assert abs(fit.coef[0]) < 1e-12


def test_two_block_proportions():
    b = block_betas(20, 1, low=0.0, high=1.0)
    truth = GroundTruth(tuple(f"S{i}" for i in range(20)), ("MKT", "SMB", "HML", "RMW", "CMA", "MOM"), b, np.zeros(20))
    assert oracle_pi0(truth, "S0", 1) == pytest.approx(9 / 19)
    assert oracle_pi0(truth, "S15", 1) == pytest.approx(9 / 19)
    # identical on every other factor
    assert oracle_pi0(truth, "S0", 0) == 1.0
    uneven = block_betas(10, 0, low=0.5, high=1.5)
    uneven[:3, 0] = 0.5
    uneven[3:, 0] = 1.5
    t2 = GroundTruth(tuple("ABCDEFGHIJ"), truth.factor_names, uneven, np.zeros(10))
    assert oracle_pi0(t2, "A", 0) == pytest.approx(2 / 9)
    assert oracle_pi0(t2, "J", 0) == pytest.approx(6 / 9)


def test_oracle_extremes():
    names = ("F",)
    same = GroundTruth(("A", "B", "C"), names, np.ones((3, 1)), np.zeros(3))
    distinct = GroundTruth(("A", "B", "C"), names, np.arange(3.0)[:, None], np.zeros(3))
    assert oracle_pi0(same, "A", 0) == 1.0
    assert oracle_pi0(distinct, "B", 0) == 0.0
    with pytest.raises(KeyError):
        oracle_pi0(same, "Z", 0)


def test_determinism():
    spec = SimSpec(n_stocks=12, n_months=2, beta_sd=0.2, missing_rate=0.01, seed=42)
    a, b = simulate(spec), simulate(spec)
    np.testing.assert_array_equal(a[0].values, b[0].values)
    np.testing.assert_array_equal(a[1].values, b[1].values)
    assert a[2] == b[2]
    c = simulate(SimSpec(n_stocks=12, n_months=2, beta_sd=0.2, missing_rate=0.01, seed=43))
    assert not np.array_equal(a[0].values, c[0].values, equal_nan=True)


def test_groups_follow_intensity():
    _, _, _, truth = simulate(SimSpec(n_stocks=40, n_months=1))
    assert truth.groups["green"] == tuple(f"S{i:04d}" for i in range(10))
    assert truth.groups["brown"] == tuple(f"S{i:04d}" for i in range(30, 40))


def test_factor_moments_within_three_se():
    spec = SimSpec(n_stocks=2, n_months=120, seed=8)
    _, factors, _, _ = simulate(spec)
    F = factors.values
    T = F.shape[0]
    vol = np.asarray(spec.factor_vol)
    assert (np.abs(F.mean(axis=0)) <= 3 * vol / np.sqrt(T)).all()
    # var of the sample variance of a normal is 2 sigma^4 / (T - 1)
    assert (np.abs(F.var(axis=0, ddof=1) - vol**2) <= 3 * vol**2 * np.sqrt(2 / (T - 1))).all()


def test_ar_factor_autocorrelation():
    spec = SimSpec(n_stocks=2, n_months=200, factor_ar=0.5, seed=2)
    F = simulate(spec)[1].values
    rho = (F[1:] * F[:-1]).sum(axis=0) / (F[:-1] ** 2).sum(axis=0)
    assert np.abs(rho - 0.5).max() < 3 * np.sqrt((1 - 0.25) / F.shape[0])
    assert np.abs(F.std(axis=0) / spec.factor_vol - 1).max() < 0.05


def test_spec_validation():
    with pytest.raises(ValueError):
        SimSpec(n_stocks=1)
    with pytest.raises(ValueError):
        SimSpec(idio_ar=1.0)
    with pytest.raises(ValueError):
        SimSpec(factor_vol=0.0)
    with pytest.raises(ValueError):
        SimSpec(n_stocks=3, betas=np.zeros((2, 6)))


def test_write_simulation_round_trip(tmp_path):
    spec = SimSpec(n_stocks=10, n_months=2, beta_sd=0.3, seed=5)
    paths = write_simulation(spec, tmp_path)
    panel, factors, ghg, truth = simulate(spec)
    np.testing.assert_array_equal(load_returns(paths["returns"]).values, panel.values)
    np.testing.assert_array_equal(load_factors(paths["factors"]).values, factors.values)
    assert load_ghg(paths["ghg"]) == ghg
    doc = json.loads(paths["ground_truth"].read_text())
    np.testing.assert_array_equal(np.array(doc["betas"]), truth.betas)
    assert set(doc["equal_exposure_proportion"]) == {"green", "brown"}


def test_paper_scale_shape():
    spec = paper_scale_spec(seed=1, n_months=1)
    assert spec.betas.shape == (500, 6)
    _, _, _, truth = simulate(spec)
    assert len(truth.groups["green"]) == len(truth.groups["brown"]) == 125
    assert all(len(np.unique(spec.betas[:, k])) == 3 for k in range(6))


@pytest.mark.slow
def test_estimation_error_shrinks_with_window_length():
    """Mean |pi0_hat - oracle| over stocks, factors and 50 seeds at T = 63, 252, 1260."""
    from peerexposure.market_data import build_window
    from peerexposure.screening import estimate_pi0, pairwise_sweep

    N = 20
    betas = block_betas(N, 0, low=0.5, high=1.5)
    errors = []
    for months in (3, 12, 60):
        err = []
        for s in range(50):
            panel, factors, _, truth = simulate(SimSpec(n_stocks=N, n_months=months + 1, betas=betas, seed=s))
            w = build_window(panel, factors, factors.calendar.dates[20], months)
            sweep = pairwise_sweep(w, panel.stocks)
            for a, stock in enumerate(panel.stocks):
                for k in range(6):
                    est = estimate_pi0(sweep.pvalue_set(a, k), seed=s).pi0
                    err.append(abs(est - oracle_pi0(truth, stock, k, panel.stocks)))
        errors.append(np.mean(err))
    assert errors[0] >= errors[1] >= errors[2], errors
