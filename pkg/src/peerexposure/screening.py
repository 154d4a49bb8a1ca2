"""Pairwise equal-exposure tests and the equal-exposure ratio.

For a focal stock ``i`` the differential return ``r_i - r_j`` against each
peer ``j`` is regressed on the factors; the HAC p-value of each slope tests
equal exposure to that factor. The share of peers with equal exposure is
then estimated from the p-value distribution with a bootstrap-selected
cutoff (Storey, 2002), and averaged over the group.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .market_data import EvaluationWindow
from .regression import HacOptions, TestResult, batch_fit

DEFAULT_LAMBDA_GRID = tuple(np.round(np.arange(0.30, 0.70 + 1e-9, 0.05), 2))
DEFAULT_BOOTSTRAP_REPS = 250
MIN_PVALUES = 5


class ScreeningError(ValueError):
    pass


@dataclass(frozen=True)
class PValueSet:
    focal: str
    factor: int
    peers: tuple[str, ...]
    pvalues: np.ndarray
    excluded: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.pvalues.size


@dataclass(frozen=True)
class EqualExposureRatio:
    focal: str
    factor: int
    pi0: float
    cutoff: float
    n_pvalues: int

    @property
    def missing(self) -> bool:
        return bool(np.isnan(self.pi0))


@dataclass(frozen=True)
class GroupHeterogeneity:
    """Per-factor equal-exposure ratio of one group at one evaluation date.

    ``pi0`` and ``heterogeneity`` are NaN for factors where no stock had a
    usable ratio; ``status`` is ``"ok"`` or the reason the cell is missing.
    """

    eval_date: np.datetime64
    universe: str
    horizon: int
    factors: tuple[str, ...]
    pi0: np.ndarray
    n_used: np.ndarray
    status: str = "ok"

    @property
    def heterogeneity(self) -> np.ndarray:
        return 1.0 - self.pi0

    @classmethod
    def missing(cls, eval_date, universe, horizon, factors, reason) -> "GroupHeterogeneity":
        K = len(factors)
        return cls(eval_date, universe, horizon, tuple(factors), np.full(K, np.nan), np.zeros(K, dtype=int), reason)


# ---------------------------------------------------------------------------
# Pairwise regressions
# ---------------------------------------------------------------------------


def pairwise_delta_fit(r_i, r_j, factors, opts: HacOptions = HacOptions()) -> list[TestResult]:
    """Tests of every slope in ``r_i - r_j = da + sum_k db_k F_k + e``.

    Raises :class:`ScreeningError` when the common sample is unusable.
    """
    F = np.asarray(factors, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    d = np.asarray(r_i, dtype=float) - np.asarray(r_j, dtype=float)
    X = np.column_stack([np.ones(F.shape[0]), F])
    bf = batch_fit(d[:, None], X, opts)
    if bf.status[0] != "ok":
        raise ScreeningError(bf.status[0])
    return [
        TestResult(k, float(bf.coef[0, k]), float(bf.se[0, k]), float(bf.tstat[0, k]), float(bf.pvalue[0, k]))
        for k in range(1, X.shape[1])
    ]


@dataclass
class PairwiseSweep:
    """All pairwise tests within one group over one window.

    ``pvalue[a, b, k]`` is symmetric in ``(a, b)``; ``delta[a, b, k]`` is
    antisymmetric. Untested pairs hold NaN and a reason in ``excluded``.
    """

    members: tuple[str, ...]
    delta: np.ndarray
    pvalue: np.ndarray
    excluded: dict[tuple[int, int], str]
    messages: list[str] = field(default_factory=list)

    def pvalue_set(self, focal: int, factor: int) -> PValueSet:
        n = len(self.members)
        peers, ps, excl = [], [], {}
        for b in range(n):
            if b == focal:
                continue
            key = (min(focal, b), max(focal, b))
            if key in self.excluded:
                excl[self.members[b]] = self.excluded[key]
                continue
            peers.append(self.members[b])
            ps.append(self.pvalue[focal, b, factor])
        return PValueSet(self.members[focal], factor, tuple(peers), np.array(ps, dtype=float), excl)


def pairwise_sweep(
    window: EvaluationWindow, members: Sequence[str], opts: HacOptions = HacOptions()
) -> PairwiseSweep:
    """Fit the differential regression once per unordered pair of ``members``.

    Members failing the window's coverage screen are excluded from every
    pair they belong to.
    """
    members = tuple(members)
    col = {s: j for j, s in enumerate(window.stocks)}
    n = len(members)
    K = window.factors.shape[1]
    delta = np.full((n, n, K), np.nan)
    pvalue = np.full((n, n, K), np.nan)
    excluded: dict[tuple[int, int], str] = {}
    ok = np.array([window.included[col[s]] for s in members], dtype=bool)

    ia, ib = np.triu_indices(n, k=1)
    for a, b in zip(ia, ib):
        if not ok[a] or not ok[b]:
            who = members[a] if not ok[a] else members[b]
            excluded[(int(a), int(b))] = f"coverage below threshold ({who})"
    live = ok[ia] & ok[ib]
    ia, ib = ia[live], ib[live]
    messages: list[str] = []
    if ia.size:
        R = window.returns[:, [col[s] for s in members]]
        Y = R[:, ia] - R[:, ib]
        bf = batch_fit(Y, window.design(), opts)
        messages = bf.messages
        good = bf.ok
        for a, b, st in zip(ia[~good], ib[~good], np.asarray(bf.status, dtype=object)[~good]):
            excluded[(int(a), int(b))] = st
        a, b = ia[good], ib[good]
        slopes = bf.coef[good, 1:]
        pv = bf.pvalue[good, 1:]
        delta[a, b] = slopes
        delta[b, a] = -slopes
        pvalue[a, b] = pv
        pvalue[b, a] = pv
    return PairwiseSweep(members, delta, pvalue, excluded, messages)


def equal_exposure_pvalues(
    focal: str, members: Sequence[str], factor: int, window: EvaluationWindow, opts: HacOptions = HacOptions()
) -> PValueSet:
    """p-values of equal exposure to ``factor`` between ``focal`` and each peer."""
    members = tuple(members)
    if focal not in members:
        raise ScreeningError(f"{focal!r} is not a member of the group")
    if len(members) < 2:
        raise ScreeningError("a peer group needs at least two members")
    sweep = pairwise_sweep(window, members, opts)
    pset = sweep.pvalue_set(members.index(focal), factor)
    if pset.n == 0:
        raise ScreeningError(f"every peer of {focal!r} was excluded")
    return pset


# ---------------------------------------------------------------------------
# Equal-exposure ratio
# ---------------------------------------------------------------------------


def task_seed(user_seed: int, *parts) -> np.random.SeedSequence:
    """Seed derived from the task identity, independent of scheduling."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    return np.random.SeedSequence([int(user_seed) & 0xFFFFFFFF, *words])


def pi0_curve(p: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """``#{p > lambda} / ((1 - lambda) n)`` for each lambda in ``grid``."""
    p = np.asarray(p, dtype=float)
    return (p[:, None] > grid[None, :]).sum(axis=0) / ((1.0 - grid) * p.size)


def estimate_pi0(
    pvals: PValueSet | np.ndarray,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    bootstrap_reps: int = DEFAULT_BOOTSTRAP_REPS,
    seed=None,
    min_pvalues: int = MIN_PVALUES,
) -> EqualExposureRatio:
    """Estimate the share of true nulls with a bootstrap-selected cutoff.

    The cutoff minimises the bootstrap mean squared error of the estimate
    around the smallest full-sample estimate over the grid. The result is
    clamped to [0, 1]. With fewer than ``min_pvalues`` p-values the ratio
    is returned as missing (NaN).
    """
    if isinstance(pvals, PValueSet):
        p, focal, factor = pvals.pvalues, pvals.focal, pvals.factor
    else:
        p, focal, factor = np.asarray(pvals, dtype=float), "", -1
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.size == 0 or (grid <= 0).any() or (grid >= 1).any():
        raise ValueError("lambda grid must be a nonempty subset of (0, 1)")
    if bootstrap_reps < 1:
        raise ValueError("bootstrap_reps must be >= 1")
    p = p[~np.isnan(p)]
    n = p.size
    if n < max(1, min_pvalues):
        return EqualExposureRatio(focal, factor, float("nan"), float("nan"), n)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    full = pi0_curve(p, grid)
    target = full.min()
    idx = rng.integers(0, n, size=(bootstrap_reps, n))
    # code c means p exceeds exactly the first c grid points
    L = grid.size
    order = np.argsort(grid)
    codes = np.searchsorted(grid[order], p, side="left")
    flat = (np.arange(bootstrap_reps)[:, None] * (L + 1) + codes[idx]).ravel()
    hist = np.bincount(flat, minlength=bootstrap_reps * (L + 1)).reshape(bootstrap_reps, L + 1)
    above = hist[:, ::-1].cumsum(axis=1)[:, ::-1][:, 1:]
    boot = np.empty((bootstrap_reps, L))
    boot[:, order] = above
    boot /= (1.0 - grid) * n
    mse = ((boot - target) ** 2).mean(axis=0)
    best = int(np.argmin(mse))
    pi0 = float(min(1.0, max(0.0, full[best])))
    return EqualExposureRatio(focal, factor, pi0, float(grid[best]), n)


def aggregate_ratios(ratios: Sequence[EqualExposureRatio]) -> tuple[float, int]:
    """Mean of the non-missing ratios and how many entered it."""
    vals = np.array([r.pi0 for r in ratios if not r.missing], dtype=float)
    if vals.size == 0:
        return float("nan"), 0
    return float(vals.mean()), int(vals.size)


def group_heterogeneity(
    ratios_by_factor: Sequence[Sequence[EqualExposureRatio]],
    eval_date,
    universe: str,
    horizon: int,
    factors: Sequence[str],
) -> GroupHeterogeneity:
    pi0 = np.full(len(factors), np.nan)
    used = np.zeros(len(factors), dtype=int)
    for k, ratios in enumerate(ratios_by_factor):
        pi0[k], used[k] = aggregate_ratios(ratios)
    status = "ok" if used.any() else "no usable ratios"
    return GroupHeterogeneity(eval_date, universe, horizon, tuple(factors), pi0, used, status)


def screen_group(
    window: EvaluationWindow,
    members: Sequence[str],
    universe: str,
    factors: Sequence[str],
    opts: HacOptions = HacOptions(),
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    bootstrap_reps: int = DEFAULT_BOOTSTRAP_REPS,
    seed: int = 0,
    min_pvalues: int = MIN_PVALUES,
) -> tuple[GroupHeterogeneity, PairwiseSweep]:
    """Pairwise tests, per-stock ratios and group aggregation for one cell.

    Members are processed in sorted order so bootstrap resamples, and hence
    the result, do not depend on how the group was listed.
    """
    sweep = pairwise_sweep(window, sorted(members), opts)
    col = {s: j for j, s in enumerate(window.stocks)}
    ratios: list[list[EqualExposureRatio]] = [[] for _ in factors]
    for a, stock in enumerate(sweep.members):
        if not window.included[col[stock]]:
            continue
        for k in range(len(factors)):
            pset = sweep.pvalue_set(a, k)
            rng = np.random.default_rng(task_seed(seed, window.eval_date, universe, window.horizon, stock, k))
            ratios[k].append(estimate_pi0(pset, lambda_grid, bootstrap_reps, rng, min_pvalues))
    het = group_heterogeneity(ratios, window.eval_date, universe, window.horizon, factors)
    return het, sweep


def exclusion_summary(sweep: PairwiseSweep) -> Counter:
    return Counter(reason.split(" (")[0] for reason in sweep.excluded.values())
