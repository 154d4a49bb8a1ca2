"""Synthetic factor-model data with known betas.

Random numbers come from numpy's ``PCG64`` bit generator seeded with the
spec's ``seed``; a given package version reproduces panels bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .market_data import (
    DEFAULT_FACTORS,
    FactorSeries,
    GhgHistory,
    GhgRecord,
    ReturnPanel,
    TradingCalendar,
    write_factors,
    write_ghg,
    write_returns,
)
from .universe import GhgSnapshot, form_peer_groups

DAYS_PER_MONTH = 21


@dataclass
class SimSpec:
    """Description of a simulated market.

    ``betas`` (stocks x K) and ``alpha`` are used verbatim when given,
    otherwise betas are drawn as ``beta_mean + beta_sd * N(0, 1)``.
    ``intensities`` fixes each stock's GHG intensity; by default it rises
    with the stock index, so the first quarter of the stocks is green and
    the last quarter brown.
    """

    n_stocks: int = 40
    n_months: int = 12
    start_month: str = "2014-01"
    factor_names: tuple[str, ...] = DEFAULT_FACTORS
    factor_vol: Sequence[float] | float = (0.01, 0.005, 0.005, 0.005, 0.005, 0.005)
    factor_ar: Sequence[float] | float = 0.0
    betas: np.ndarray | None = None
    beta_mean: Sequence[float] | float = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    beta_sd: Sequence[float] | float = 0.0
    alpha: Sequence[float] | float = 0.0
    idio_vol: Sequence[float] | float = 0.02
    idio_ar: float = 0.0
    rf: float = 0.0
    intensities: Sequence[float] | None = None
    missing_rate: float = 0.0
    lower_q: float = 0.25
    upper_q: float = 0.75
    seed: int = 0

    def __post_init__(self):
        K = len(self.factor_names)
        if self.n_stocks < 2:
            raise ValueError("need at least two stocks")
        if self.n_months < 1:
            raise ValueError("need at least one month of data")
        self.factor_vol = np.broadcast_to(np.asarray(self.factor_vol, dtype=float), (K,)).copy()
        self.factor_ar = np.broadcast_to(np.asarray(self.factor_ar, dtype=float), (K,)).copy()
        self.idio_vol = np.broadcast_to(np.asarray(self.idio_vol, dtype=float), (self.n_stocks,)).copy()
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (self.n_stocks,)).copy()
        if (self.factor_vol <= 0).any() or (self.idio_vol < 0).any():
            raise ValueError("volatilities must be positive")
        if (np.abs(self.factor_ar) >= 1).any() or abs(self.idio_ar) >= 1:
            raise ValueError("AR coefficients must lie in (-1, 1)")
        if self.betas is not None:
            self.betas = np.asarray(self.betas, dtype=float)
            if self.betas.shape != (self.n_stocks, K):
                raise ValueError(f"betas must have shape ({self.n_stocks}, {K})")
        if self.intensities is not None and len(self.intensities) != self.n_stocks:
            raise ValueError("one intensity per stock is required")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")

    @property
    def stock_ids(self) -> tuple[str, ...]:
        width = max(4, len(str(self.n_stocks - 1)))
        return tuple(f"S{i:0{width}d}" for i in range(self.n_stocks))


@dataclass
class GroundTruth:
    stocks: tuple[str, ...]
    factor_names: tuple[str, ...]
    betas: np.ndarray
    alpha: np.ndarray
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def group_of(self, stock: str) -> tuple[str, ...]:
        for members in self.groups.values():
            if stock in members:
                return members
        return self.stocks

    def to_json(self) -> dict:
        props = {
            label: {s: [oracle_pi0(self, s, k) for k in range(len(self.factor_names))] for s in members}
            for label, members in self.groups.items()
        }
        return {
            "stocks": list(self.stocks),
            "factors": list(self.factor_names),
            "betas": self.betas.tolist(),
            "alpha": self.alpha.tolist(),
            "groups": {k: list(v) for k, v in self.groups.items()},
            "equal_exposure_proportion": props,
        }


def trading_calendar(start_month: str, n_months: int, days: int = DAYS_PER_MONTH) -> TradingCalendar:
    """Days ``1..days`` of each of ``n_months`` consecutive months.

    Weekends are ignored on purpose: every simulated month has exactly
    ``days`` trading dates.
    """
    if not 1 <= days <= 28:
        raise ValueError("days per month must lie in 1..28")
    first = np.datetime64(start_month, "M")
    starts = (first + np.arange(n_months)).astype("datetime64[D]")
    return TradingCalendar((starts[:, None] + np.arange(days)).reshape(-1))


def _ar1(rng: np.random.Generator, T: int, n: int, vol: np.ndarray, phi) -> np.ndarray:
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (n,))
    shocks = rng.standard_normal((T, n)) * vol * np.sqrt(1.0 - phi**2)
    if not phi.any():
        return shocks
    x = np.empty((T, n))
    x[0] = rng.standard_normal(n) * vol
    for t in range(1, T):
        x[t] = phi * x[t - 1] + shocks[t]
    return x


def simulate(spec: SimSpec) -> tuple[ReturnPanel, FactorSeries, GhgHistory, GroundTruth]:
    """Draw returns ``r = alpha + F beta' + e`` and matching GHG reports."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    K = len(spec.factor_names)
    N = spec.n_stocks
    cal = trading_calendar(spec.start_month, spec.n_months)
    T = len(cal)

    if spec.betas is not None:
        betas = spec.betas.copy()
    else:
        mean = np.broadcast_to(np.asarray(spec.beta_mean, dtype=float), (K,))
        sd = np.broadcast_to(np.asarray(spec.beta_sd, dtype=float), (K,))
        betas = mean + sd * rng.standard_normal((N, K))

    F = _ar1(rng, T, K, spec.factor_vol, spec.factor_ar)
    eps = _ar1(rng, T, N, spec.idio_vol, spec.idio_ar)
    R = spec.alpha[None, :] + F @ betas.T + eps + spec.rf
    if spec.missing_rate > 0:
        R[rng.random((T, N)) < spec.missing_rate] = np.nan

    stocks = spec.stock_ids
    panel = ReturnPanel(cal, stocks, R)
    factors = FactorSeries(cal, tuple(spec.factor_names), F, np.full(T, spec.rf))

    intensity = (
        np.arange(1, N + 1, dtype=float) if spec.intensities is None else np.asarray(spec.intensities, dtype=float)
    )
    y0 = int(str(cal.dates[0])[:4]) - 3
    y1 = int(str(cal.dates[-1])[:4])
    records = [GhgRecord(s, y, float(intensity[i])) for i, s in enumerate(stocks) for y in range(y0, y1 + 1)]
    ghg = GhgHistory(tuple(records))

    groups: dict[str, tuple[str, ...]] = {}
    snap = GhgSnapshot(cal.dates[0], dict(zip(stocks, intensity.tolist())), {s: y0 for s in stocks})
    if N >= 8:
        green, brown = form_peer_groups(snap, spec.lower_q, spec.upper_q)
        groups = {"green": green.members, "brown": brown.members}
    truth = GroundTruth(stocks, tuple(spec.factor_names), betas, spec.alpha.copy(), groups)
    return panel, factors, ghg, truth


def oracle_pi0(truth: GroundTruth, stock: str, factor: int, members: Sequence[str] | None = None) -> float:
    """Exact share of ``stock``'s peers whose true beta on ``factor`` equals its own."""
    if stock not in truth.stocks:
        raise KeyError(f"unknown stock {stock!r}")
    members = tuple(members) if members is not None else truth.group_of(stock)
    idx = {s: i for i, s in enumerate(truth.stocks)}
    b = truth.betas[idx[stock], factor]
    peers = [s for s in members if s != stock]
    if not peers:
        return float("nan")
    return sum(truth.betas[idx[s], factor] == b for s in peers) / len(peers)


def write_simulation(spec: SimSpec, out_dir) -> dict[str, Path]:
    """Simulate and write ``returns.csv``, ``factors.csv``, ``ghg.csv``, ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel, factors, ghg, truth = simulate(spec)
    paths = {
        "returns": out / "returns.csv",
        "factors": out / "factors.csv",
        "ghg": out / "ghg.csv",
        "ground_truth": out / "ground_truth.json",
    }
    write_returns(panel, paths["returns"])
    write_factors(factors, paths["factors"])
    write_ghg(ghg, paths["ghg"])
    doc = truth.to_json()
    doc["spec"] = _spec_json(spec)
    paths["ground_truth"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return paths


def _spec_json(spec: SimSpec) -> dict:
    d = asdict(spec)
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def paper_scale_spec(seed: int = 0, n_months: int = 84, start_month: str = "2014-01") -> SimSpec:
    """500 stocks, two groups of 125, with betas clustered on a coarse grid.

    Betas take few distinct values per factor so that some peers share an
    exposure exactly and the true equal-exposure ratio is nontrivial.
    """
    rng = np.random.Generator(np.random.PCG64(seed + 7919))
    N, K = 500, 6
    levels = np.array([[0.6, 1.0, 1.4], [-0.5, 0.0, 0.5], [-0.5, 0.0, 0.5],
                       [-0.5, 0.0, 0.5], [-0.5, 0.0, 0.5], [-0.5, 0.0, 0.5]])
    betas = np.stack([levels[k, rng.integers(0, 3, N)] for k in range(K)], axis=1)
    return SimSpec(n_stocks=N, n_months=n_months, start_month=start_month, betas=betas, seed=seed)


def block_betas(n: int, factor: int, low: float = 0.0, high: float = 1.0, base=None, K: int = 6) -> np.ndarray:
    """Two-block design: the first half of stocks at ``low``, the rest at ``high`` on ``factor``."""
    b = np.tile(np.asarray(base if base is not None else [1.0] + [0.0] * (K - 1), dtype=float), (n, 1))
    b[: n // 2, factor] = low
    b[n // 2 :, factor] = high
    return b
