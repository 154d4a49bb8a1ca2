"""Monthly rolling evaluation and the report tables built from it."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .market_data import (
    DataError,
    FactorSeries,
    GhgHistory,
    ReturnPanel,
    WindowError,
    align_returns,
    build_window,
    load_factors,
    load_ghg,
    load_returns,
    month_end,
)
from .regression import HacOptions, RegressionError, batch_fit, hac_covariance, ols_fit
from .screening import DEFAULT_BOOTSTRAP_REPS, DEFAULT_LAMBDA_GRID, MIN_PVALUES, GroupHeterogeneity, screen_group
from .universe import GroupFormationError, form_peer_groups, latest_intensity

logger = logging.getLogger(__name__)

UNIVERSES = ("brown", "green")
PERCENTILES = (10, 50, 90)


class PipelineError(DataError):
    pass


@dataclass(frozen=True)
class RunConfig:
    returns: str | None = None
    factors: str | None = None
    ghg: str | None = None
    factor_units: str = "decimal"
    out_dir: str = "out"
    start: str = "2014-01"
    end: str | None = None
    horizons: tuple[int, ...] = (3, 6, 12)
    lower_q: float = 0.25
    upper_q: float = 0.75
    ghg_lag_months: int = 12
    min_coverage: float = 0.9
    prewhiten: bool = True
    fixed_bandwidth: float | None = None
    df_adjust: bool = True
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    bootstrap_reps: int = DEFAULT_BOOTSTRAP_REPS
    min_pvalues: int = MIN_PVALUES
    significance: float = 0.05
    trend_horizon: int | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise PipelineError("horizons must be positive month counts")
        if len(set(self.horizons)) != len(self.horizons):
            raise PipelineError("horizons must be distinct")
        start = _month(self.start)
        if self.end is not None and _month(self.end) < start:
            raise PipelineError(f"end month {self.end} precedes start month {self.start}")
        if not 0 < self.lower_q < self.upper_q < 1:
            raise PipelineError("quantiles must satisfy 0 < lower_q < upper_q < 1")
        if self.ghg_lag_months < 0:
            raise PipelineError("ghg_lag_months must be >= 0")
        if not 0 < self.min_coverage <= 1:
            raise PipelineError("min_coverage must lie in (0, 1]")
        if not 0 < self.significance < 1:
            raise PipelineError("significance must lie in (0, 1)")
        if self.bootstrap_reps < 1 or self.min_pvalues < 1:
            raise PipelineError("bootstrap_reps and min_pvalues must be >= 1")
        if not self.lambda_grid or not all(0 < x < 1 for x in self.lambda_grid):
            raise PipelineError("lambda grid must be a nonempty subset of (0, 1)")
        if self.trend_horizon is not None and self.trend_horizon not in self.horizons:
            raise PipelineError("trend_horizon must be one of the configured horizons")
        if self.threads < 0:
            raise PipelineError("threads must be >= 0")
        self.hac_options()

    def hac_options(self) -> HacOptions:
        try:
            return HacOptions(self.prewhiten, self.fixed_bandwidth, 0.97, self.df_adjust)
        except ValueError as exc:
            raise PipelineError(str(exc)) from None

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def manifest(self) -> dict:
        """Resolved settings that determine output bytes.

        ``threads`` and ``out_dir`` are left out: neither affects results.
        """
        d = asdict(self)
        d.pop("threads")
        d.pop("out_dir")
        d["horizons"] = list(self.horizons)
        d["lambda_grid"] = list(self.lambda_grid)
        return d


@dataclass(frozen=True)
class MarketData:
    panel: ReturnPanel
    factors: FactorSeries
    ghg: GhgHistory

    @classmethod
    def load(cls, config: RunConfig) -> "MarketData":
        for name in ("returns", "factors", "ghg"):
            if getattr(config, name) is None:
                raise PipelineError(f"no {name} file configured")
        factors = load_factors(config.factors, units=config.factor_units)
        panel = align_returns(load_returns(config.returns), factors.calendar)
        return cls(panel, factors, load_ghg(config.ghg))

    @classmethod
    def from_parts(cls, panel, factors, ghg) -> "MarketData":
        return cls(align_returns(panel, factors.calendar), factors, ghg)


def _month(value) -> np.datetime64:
    try:
        return np.datetime64(str(value)[:7], "M")
    except ValueError:
        raise PipelineError(f"cannot parse month {value!r}; expected YYYY-MM") from None


def evaluation_months(start, end) -> list[np.datetime64]:
    """Inclusive list of months between ``start`` and ``end`` (``YYYY-MM``)."""
    a, b = _month(start), _month(end)
    if b < a:
        raise PipelineError(f"end month {end} precedes start month {start}")
    return list(np.arange(a, b + 1))


def default_end(factors: FactorSeries, horizon: int) -> np.datetime64:
    """Last evaluation month whose ``horizon``-month window ends inside the data."""
    return np.datetime64(factors.calendar.dates[-1], "M") - horizon


# ---------------------------------------------------------------------------
# One (month, horizon, universe) cell
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    heterogeneity: GroupHeterogeneity
    betas: np.ndarray | None = None
    significant: np.ndarray | None = None
    group_size: int = 0
    notes: list[str] = field(default_factory=list)


def run_month(data: MarketData, config: RunConfig, month, horizon: int, universe: str) -> CellResult:
    """Steps 1-3 for one evaluation month, horizon and universe.

    Failures that only affect this cell come back as a missing entry with
    the reason in ``status``; they never raise.
    """
    names = data.factors.names
    month = _month(month)
    eval_date = data.factors.calendar.month_ends().get(month)
    if eval_date is None:
        het = GroupHeterogeneity.missing(month_end(month), universe, horizon, names, "no trading dates in month")
        return CellResult(het)

    def missing(reason: str) -> CellResult:
        return CellResult(GroupHeterogeneity.missing(eval_date, universe, horizon, names, reason))

    try:
        snap = latest_intensity(data.ghg, eval_date, config.ghg_lag_months).restrict(data.panel.stocks)
        green, brown = form_peer_groups(snap, config.lower_q, config.upper_q)
    except GroupFormationError as exc:
        return missing(f"group formation failed: {exc}")
    group = green if universe == "green" else brown

    try:
        window = build_window(data.panel, data.factors, eval_date, horizon, config.min_coverage, group.members)
    except WindowError as exc:
        return missing(exc.reason)

    members = window.included_stocks()
    if len(members) < 2:
        return missing("fewer than two stocks pass the coverage screen")

    opts = config.hac_options()
    het, sweep = screen_group(
        window,
        group.members,
        universe,
        names,
        opts,
        config.lambda_grid,
        config.bootstrap_reps,
        config.seed,
        config.min_pvalues,
    )
    notes = list(sweep.messages)
    if len(members) < group.N:
        notes.append(f"{group.N - len(members)} of {group.N} members excluded by coverage")

    cols = np.flatnonzero(window.included)
    excess = window.returns[:, cols] - window.rf[:, None]
    fits = batch_fit(excess, window.design(), opts)
    betas = fits.coef[:, 1:]
    sig = fits.pvalue[:, 1:] < config.significance
    sig = np.where(np.isnan(fits.pvalue[:, 1:]), np.nan, sig)
    return CellResult(het, betas, sig, group.N, notes)


# ---------------------------------------------------------------------------
# Full series and summaries
# ---------------------------------------------------------------------------


@dataclass
class ExposureRow:
    universe: str
    horizon: int
    factor: str
    p10: float
    p50: float
    p90: float
    share_significant: float


@dataclass
class SummaryRow:
    universe: str
    horizon: int
    factor: str
    average: float
    sd: float
    min: float
    max: float
    n_months: int


@dataclass
class TrendFit:
    universe: str
    factor: str
    intercept: float
    slope: float
    slope_se: float
    n_points: int
    month_index: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def fitted(self, month_index=None) -> np.ndarray:
        m = self.month_index if month_index is None else np.asarray(month_index, dtype=float)
        return self.intercept + self.slope * m


@dataclass
class SeriesResult:
    config: RunConfig
    series: dict[tuple[str, int], list[GroupHeterogeneity]]
    exposure: list[ExposureRow]
    summary: list[SummaryRow]
    trends: list[TrendFit]
    months: dict[int, list[np.datetime64]]


def exposure_summary(
    betas_by_month: Sequence[np.ndarray], significant_by_month: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Average cross-sectional beta percentiles and significant share.

    Each element of the inputs is a (stocks, K) array for one month.
    Percentiles use linear interpolation between order statistics. Returns
    a (3, K) percentile array (10th, 50th, 90th) and a (K,) share.
    """
    if not betas_by_month:
        raise PipelineError("exposure summary needs at least one month of fits")
    pct, share = [], []
    for b, s in zip(betas_by_month, significant_by_month):
        b = np.asarray(b, dtype=float)
        s = np.asarray(s, dtype=float)
        pct.append(np.nanpercentile(b, PERCENTILES, axis=0, method="linear"))
        share.append(np.nanmean(s, axis=0))
    return np.mean(pct, axis=0), np.mean(share, axis=0)


def summarize_series(entries: Sequence[GroupHeterogeneity], factor: int) -> tuple[float, float, float, float, int]:
    """Average, sample SD, min, max and count over realized months."""
    h = np.array([e.heterogeneity[factor] for e in entries], dtype=float)
    h = h[~np.isnan(h)]
    if h.size == 0:
        return (float("nan"),) * 4 + (0,)
    sd = float(h.std(ddof=1)) if h.size > 1 else 0.0
    return float(h.mean()), sd, float(h.min()), float(h.max()), int(h.size)


def fit_time_trend(
    entries: Sequence[GroupHeterogeneity], factor: int, opts: HacOptions = HacOptions(), universe: str = ""
) -> TrendFit:
    """OLS of heterogeneity on elapsed months with a HAC slope standard error.

    Month index 0 is the first entry; missing months keep their place in
    the index but do not enter the fit.
    """
    if not entries:
        raise PipelineError("trend fit needs at least three non-missing points")
    first = np.datetime64(entries[0].eval_date, "M")
    idx = np.array([(np.datetime64(e.eval_date, "M") - first).astype(int) for e in entries], dtype=float)
    y = np.array([e.heterogeneity[factor] for e in entries], dtype=float)
    keep = ~np.isnan(y)
    return trend_from_points(idx[keep], y[keep], opts, universe, entries[0].factors[factor])


def trend_from_points(month_index, values, opts: HacOptions = HacOptions(), universe: str = "", factor: str = "") -> TrendFit:
    x = np.asarray(month_index, dtype=float)
    y = np.asarray(values, dtype=float)
    if y.size < 3:
        raise PipelineError(f"trend fit needs at least three non-missing points, got {y.size}")
    X = np.column_stack([np.ones(x.size), x])
    fit = ols_fit(y, X)
    cov = None
    # short series cannot support prewhitening or the automatic bandwidth
    for attempt in (opts, replace(opts, prewhiten=False), replace(opts, prewhiten=False, bandwidth=0.0)):
        try:
            cov = hac_covariance(fit, X, attempt)
            break
        except RegressionError as exc:
            logger.debug("trend HAC fallback for %s/%s: %s", universe, factor, exc)
    se = float(np.sqrt(max(cov[1, 1], 0.0)))
    return TrendFit(universe, factor, float(fit.coef[0]), float(fit.coef[1]), se, int(y.size), x)


def _worker_count(threads: int) -> int:
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def run_series(config: RunConfig, data: MarketData | None = None) -> SeriesResult:
    """Evaluate every (universe, horizon, month) cell and build the summaries."""
    data = MarketData.load(config) if data is None else data
    names = data.factors.names
    months: dict[int, list[np.datetime64]] = {}
    tasks = []
    for h in config.horizons:
        end = _month(config.end) if config.end is not None else default_end(data.factors, h)
        if end < _month(config.start):
            months[h] = []
            logger.warning("no evaluation months for h=%d: data end leaves no complete window", h)
            continue
        months[h] = evaluation_months(config.start, end)
        tasks.extend((u, h, m) for u in UNIVERSES for m in months[h])
    if not tasks:
        raise PipelineError("no evaluation months in the configured span")

    workers = _worker_count(config.threads)
    logger.info("evaluating %d cells with %d worker(s)", len(tasks), workers)

    def job(task):
        u, h, m = task
        return run_month(data, config, m, h, u)

    if workers == 1:
        results = [job(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, tasks))

    series: dict[tuple[str, int], list[GroupHeterogeneity]] = {}
    cells: dict[tuple[str, int], list[CellResult]] = {}
    for (u, h, _), res in zip(tasks, results):
        series.setdefault((u, h), []).append(res.heterogeneity)
        cells.setdefault((u, h), []).append(res)
    n_ok = sum(r.heterogeneity.status == "ok" for r in results)
    if n_ok == 0:
        raise PipelineError("no evaluation month produced a heterogeneity value")
    logger.info("%d of %d cells realized", n_ok, len(results))

    exposure: list[ExposureRow] = []
    summary: list[SummaryRow] = []
    for (u, h), entries in series.items():
        realized = [c for c in cells[(u, h)] if c.betas is not None and c.betas.size]
        if realized:
            pct, share = exposure_summary([c.betas for c in realized], [c.significant for c in realized])
        else:
            pct, share = np.full((3, len(names)), np.nan), np.full(len(names), np.nan)
        for k, name in enumerate(names):
            exposure.append(ExposureRow(u, h, name, *pct[:, k], share[k]))
            summary.append(SummaryRow(u, h, name, *summarize_series(entries, k)))

    trend_h = config.trend_horizon if config.trend_horizon is not None else min(config.horizons)
    trends: list[TrendFit] = []
    opts = config.hac_options()
    for u in UNIVERSES:
        entries = series.get((u, trend_h), [])
        for k, name in enumerate(names):
            try:
                trends.append(fit_time_trend(entries, k, opts, u))
            except (PipelineError, RegressionError) as exc:
                logger.warning("no trend for %s/%s: %s", u, name, exc)
                trends.append(TrendFit(u, name, float("nan"), float("nan"), float("nan"), 0))
    return SeriesResult(config, series, exposure, summary, trends, months)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

HETEROGENEITY_HEADER = ("eval_date", "universe", "horizon_months", "factor", "pi0", "heterogeneity", "n_stocks", "status")
EXPOSURE_HEADER = ("universe", "horizon_months", "factor", "p10", "p50", "p90", "share_significant")
SUMMARY_HEADER = ("universe", "horizon_months", "factor", "average", "sd", "min", "max", "n_months")
TREND_HEADER = ("universe", "factor", "intercept", "slope_per_month", "slope_hac_se")


def _num(x) -> str:
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def heterogeneity_rows(series: dict[tuple[str, int], list[GroupHeterogeneity]]):
    for (u, h), entries in series.items():
        for e in entries:
            for k, name in enumerate(e.factors):
                ok = not np.isnan(e.pi0[k])
                status = "ok" if ok else (e.status if e.status != "ok" else "too few p-values")
                yield (str(e.eval_date), u, h, name, _num(e.pi0[k]), _num(e.heterogeneity[k]), int(e.n_used[k]), status)


def summary_rows(summary: Sequence[SummaryRow]):
    for r in summary:
        yield (r.universe, r.horizon, r.factor, _num(r.average), _num(r.sd), _num(r.min), _num(r.max), r.n_months)


def trend_rows(trends: Sequence[TrendFit]):
    for t in trends:
        yield (t.universe, t.factor, _num(t.intercept), _num(t.slope), _num(t.slope_se))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs(result: SeriesResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PipelineError(f"output directory {out} is not writable: {exc}") from None

    paths = {
        "heterogeneity": out / "heterogeneity.csv",
        "exposure_summary": out / "exposure_summary.csv",
        "heterogeneity_summary": out / "heterogeneity_summary.csv",
        "trend": out / "trend.csv",
        "manifest": out / "run_manifest.json",
    }
    _write_csv(paths["heterogeneity"], HETEROGENEITY_HEADER, heterogeneity_rows(result.series))
    _write_csv(
        paths["exposure_summary"],
        EXPOSURE_HEADER,
        (
            (r.universe, r.horizon, r.factor, _num(r.p10), _num(r.p50), _num(r.p90), _num(r.share_significant))
            for r in result.exposure
        ),
    )
    _write_csv(paths["heterogeneity_summary"], SUMMARY_HEADER, summary_rows(result.summary))
    _write_csv(paths["trend"], TREND_HEADER, trend_rows(result.trends))

    cfg = result.config
    checksums = {}
    for name in ("returns", "factors", "ghg"):
        p = getattr(cfg, name)
        checksums[name] = file_sha256(p) if p is not None and Path(p).is_file() else None
    manifest = {
        "package_version": __version__,
        "config": cfg.manifest(),
        "seed": cfg.seed,
        "input_sha256": checksums,
        "evaluation_months": {str(h): [str(m) for m in ms] for h, ms in result.months.items()},
        "trend_horizon": cfg.trend_horizon if cfg.trend_horizon is not None else min(cfg.horizons),
        "realized_cells": {
            f"{u}/{h}": sum(e.status == "ok" for e in entries) for (u, h), entries in result.series.items()
        },
        "rng": "numpy PCG64 via SeedSequence(seed, sha256(eval_date|universe|horizon|stock|factor))",
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_heterogeneity(path) -> dict[tuple[str, int], list[GroupHeterogeneity]]:
    """Rebuild the series from a ``heterogeneity.csv`` file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    rows: dict[tuple[str, int], dict[str, dict[str, tuple]]] = {}
    factor_order: list[str] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in HETEROGENEITY_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing required column {missing[0]!r}")
        for rec in reader:
            try:
                key = (rec["universe"], int(rec["horizon_months"]))
                pi0 = float(rec["pi0"]) if rec["pi0"] else float("nan")
                n = int(rec["n_stocks"])
            except ValueError:
                raise DataError(f"{path}: line {reader.line_num}: malformed row") from None
            if rec["factor"] not in factor_order:
                factor_order.append(rec["factor"])
            rows.setdefault(key, {}).setdefault(rec["eval_date"], {})[rec["factor"]] = (pi0, n, rec["status"])
    series: dict[tuple[str, int], list[GroupHeterogeneity]] = {}
    for key, by_date in rows.items():
        entries = []
        for d in sorted(by_date):
            vals = by_date[d]
            pi0 = np.array([vals.get(f, (np.nan, 0, ""))[0] for f in factor_order])
            n = np.array([vals.get(f, (np.nan, 0, ""))[1] for f in factor_order], dtype=int)
            statuses = {vals[f][2] for f in vals}
            status = "ok" if "ok" in statuses else sorted(statuses)[0]
            entries.append(GroupHeterogeneity(np.datetime64(d, "D"), key[0], key[1], tuple(factor_order), pi0, n, status))
        series[key] = entries
    return series
