"""OLS with quadratic-spectral HAC inference.

The long-run covariance follows Andrews (1991) with the automatic AR(1)
plug-in bandwidth and, optionally, the VAR(1) prewhitening / recolouring
step of Andrews and Monahan (1992).

Everything is written for a batch of regressions sharing one design
matrix: ``hac_batch`` takes residuals of shape ``(P, T)`` so that the
thousands of pairwise regressions in a peer group are computed with a few
vectorised numpy calls. The single-regression functions are thin wrappers.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
QS_BANDWIDTH_CONSTANT = 1.3221
# upper bound on P * n * n floats held at once by the kernel-weighting step
_CHUNK_ELEMENTS = 4_000_000


class RegressionError(ArithmeticError):
    """Numerical failure: too few observations, rank deficiency, singular VAR."""


class HacWarning(UserWarning):
    pass


@dataclass(frozen=True)
class HacOptions:
    prewhiten: bool = True
    bandwidth: float | None = None
    ar_clamp: float = 0.97
    df_adjust: bool = True

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth >= 0:
            raise ValueError(f"fixed bandwidth must be >= 0, got {self.bandwidth}")
        if not 0 < self.ar_clamp < 1:
            raise ValueError(f"ar_clamp must lie in (0, 1), got {self.ar_clamp}")


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    resid: np.ndarray
    shape: tuple[int, int]
    r2: float

    @property
    def T(self) -> int:
        return self.shape[0]


@dataclass(frozen=True)
class TestResult:
    index: int
    estimate: float
    se: float
    tstat: float
    pvalue: float

    __test__ = False  # keep pytest from collecting this class


@dataclass
class HacDiagnostics:
    bandwidth: np.ndarray
    ar_clamped: np.ndarray
    rho_clamped: np.ndarray
    floored: np.ndarray
    messages: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------


def _check_design(X: np.ndarray) -> np.ndarray:
    T, m = X.shape
    if T <= m:
        raise RegressionError(f"need T > K+1 observations, got T={T} for {m} regressors")
    xtx = X.T @ X
    if not np.isfinite(xtx).all() or np.linalg.cond(xtx) > COND_LIMIT:
        raise RegressionError("design matrix is rank deficient (condition number above 1e12)")
    return xtx


def ols_fit(y, X) -> RegressionFit:
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("y must be length T and X must be T x (K+1)")
    xtx = _check_design(X)
    coef = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ coef
    tss = float(((y - y.mean()) ** 2).sum())
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else (1.0 if rss == 0 else 0.0)
    return RegressionFit(coef, resid, X.shape, r2)


# ---------------------------------------------------------------------------
# Kernel and bandwidth
# ---------------------------------------------------------------------------


def qs_kernel(x):
    """Quadratic-spectral kernel, continuous at zero. Accepts arrays."""
    x = np.asarray(x, dtype=float)
    z = 6.0 * np.pi * x / 5.0
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small] ** 2
    out[small] = 1.0 - zs / 10.0 + zs**2 / 280.0
    zl = z[~small]
    with np.errstate(over="ignore", invalid="ignore"):
        out[~small] = 3.0 / zl**2 * (np.sin(zl) / zl - np.cos(zl))
    out[np.isinf(z)] = 0.0
    return out if out.ndim else float(out)


def default_weights(m: int) -> np.ndarray:
    """Zero weight on the intercept score, one on every slope score."""
    if m == 1:
        return np.ones(1)
    w = np.ones(m)
    w[0] = 0.0
    return w


def _ar1_bandwidth(u: np.ndarray, w: np.ndarray, clamp: float) -> tuple[np.ndarray, np.ndarray]:
    """Andrews AR(1) plug-in bandwidth for a batch ``u`` of shape (P, n, m)."""
    n = u.shape[1]
    lag, cur = u[:, :-1], u[:, 1:]
    den = np.einsum("pta,pta->pa", lag, lag)
    num = np.einsum("pta,pta->pa", cur, lag)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(den > 0, num / den, 0.0)
    active = w[None, :] > 0
    bad = (np.abs(rho) >= 1) & active
    rho = np.where(np.abs(rho) >= 1, np.sign(rho) * clamp, rho)
    e = cur - rho[:, None, :] * lag
    sigma2 = np.einsum("pta,pta->pa", e, e) / (n - 1)
    return andrews_bandwidth(rho, sigma2, w, n), bad.any(axis=1)


def andrews_bandwidth(rho, sigma2, weights, n: int):
    """QS bandwidth from per-column AR(1) parameters (last axis = columns)."""
    rho = np.asarray(rho, dtype=float)
    s4 = np.asarray(sigma2, dtype=float) ** 2
    w = np.asarray(weights, dtype=float)
    top = (w * 4.0 * rho**2 * s4 / (1.0 - rho) ** 8).sum(axis=-1)
    bottom = (w * s4 / (1.0 - rho) ** 4).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(bottom > 0, top / bottom, 0.0)
    return QS_BANDWIDTH_CONSTANT * (alpha * n) ** 0.2


def auto_bandwidth(moments, weights=None, clamp: float = 0.97) -> float:
    """Automatic QS bandwidth ``1.3221 * (alpha(2) * T) ** (1/5)``.

    Each column of ``moments`` is approximated by an AR(1) fitted by OLS
    (no intercept). Autoregressive coefficients with ``|rho| >= 1`` are
    clamped to ``+-clamp`` and a :class:`HacWarning` is issued.
    """
    u = np.asarray(moments, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T, m = u.shape
    if T < 8:
        raise ValueError(f"automatic bandwidth needs T >= 8, got {T}")
    w = default_weights(m) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (m,) or (w < 0).any() or not (w > 0).any():
        raise ValueError("bandwidth weights must be nonnegative and not all zero")
    bw, bad = _ar1_bandwidth(u[None], w, clamp)
    if bad[0]:
        warnings.warn("AR(1) coefficient with |rho| >= 1 clamped in bandwidth selection", HacWarning)
    return float(bw[0])


# ---------------------------------------------------------------------------
# HAC covariance
# ---------------------------------------------------------------------------


def _kernel_sum(u: np.ndarray, bw: np.ndarray) -> np.ndarray:
    """Sum_s Sum_t k((s - t) / bw) u_s u_t' / n for each batch member."""
    P, n, m = u.shape
    out = np.empty((P, m, m))
    lags = np.arange(n, dtype=float)
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    step = max(1, _CHUNK_ELEMENTS // (n * n))
    for a in range(0, P, step):
        b = min(P, a + step)
        ub, sb = u[a:b], bw[a:b]
        zero = sb <= 0
        if zero.all():
            out[a:b] = np.einsum("pti,ptj->pij", ub, ub) / n
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            kv = qs_kernel(lags[None, :] / np.where(zero, 1.0, sb)[:, None])
        kv[zero, 1:] = 0.0
        kv[zero, 0] = 1.0
        W = kv[:, dist]
        out[a:b] = np.einsum("pti,ptj->pij", ub, W @ ub) / n
    return out


def hac_batch(
    X: np.ndarray,
    resid: np.ndarray,
    opts: HacOptions = HacOptions(),
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, HacDiagnostics]:
    """HAC covariance of the OLS coefficients for a batch of regressions.

    ``X`` is the shared (T, m) design, ``resid`` has shape (P, T). Returns
    the (P, m, m) covariance stack and per-regression diagnostics.
    """
    X = np.asarray(X, dtype=float)
    resid = np.atleast_2d(np.asarray(resid, dtype=float))
    T, m = X.shape
    P = resid.shape[0]
    if resid.shape[1] != T:
        raise ValueError("residual length does not match design rows")
    w = default_weights(m) if weights is None else np.asarray(weights, dtype=float)
    v = X[None, :, :] * resid[:, :, None]

    ar_clamped = np.zeros(P, dtype=bool)
    if opts.prewhiten:
        if T < 2 * m + 2:
            raise RegressionError(f"T={T} too small to prewhiten {m} scores with a VAR(1)")
        cur, lag = v[:, 1:], v[:, :-1]
        sxx = np.einsum("pti,ptj->pij", lag, lag)
        syx = np.einsum("pti,ptj->pij", cur, lag)
        A = syx @ np.linalg.pinv(sxx, hermitian=True)
        U, s, Vt = np.linalg.svd(A)
        ar_clamped = s.max(axis=1) > opts.ar_clamp
        if ar_clamped.any():
            A = (U * np.minimum(s, opts.ar_clamp)[:, None, :]) @ Vt
        u = cur - lag @ np.swapaxes(A, 1, 2)
    else:
        A = None
        u = v

    n = u.shape[1]
    if opts.bandwidth is not None:
        bw = np.full(P, float(opts.bandwidth))
        rho_clamped = np.zeros(P, dtype=bool)
    else:
        if n < 8:
            raise RegressionError(f"automatic bandwidth needs at least 8 score rows, got {n}")
        bw, rho_clamped = _ar1_bandwidth(u, w, opts.ar_clamp)

    omega = _kernel_sum(u, bw)
    if A is not None:
        I_A = np.eye(m)[None] - A
        if (np.linalg.cond(I_A) > COND_LIMIT).any():
            raise RegressionError("I - A is singular after clamping")
        B = np.linalg.inv(I_A)
        omega = B @ omega @ np.swapaxes(B, 1, 2)

    Q = np.linalg.inv(X.T @ X)
    cov = T * (Q[None] @ omega @ Q[None])
    if opts.df_adjust:
        cov *= T / (T - m)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    diag = np.einsum("pii->pi", cov)
    neg = diag < 0
    floored = neg.any(axis=1)
    if floored.any():
        idx = np.nonzero(neg)
        cov[idx[0], idx[1], idx[1]] = 0.0

    diag_info = HacDiagnostics(bw, ar_clamped, rho_clamped, floored)
    if rho_clamped.any():
        diag_info.messages.append(f"{int(rho_clamped.sum())} bandwidth AR(1) coefficients clamped")
    if floored.any():
        diag_info.messages.append(f"{int(floored.sum())} negative variances floored at 0")
    return cov, diag_info


def hac_covariance(fit: RegressionFit, X, opts: HacOptions = HacOptions(), weights=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != fit.shape:
        raise ValueError(f"design shape {X.shape} does not match fit shape {fit.shape}")
    cov, info = hac_batch(X, fit.resid[None, :], opts, weights)
    for msg in info.messages:
        warnings.warn(msg, HacWarning)
    return cov[0]


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------


def studentize(est: np.ndarray, var: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard errors, t-statistics and two-sided normal p-values.

    A zero standard error gives ``p = 1`` for a zero estimate and ``p = 0``
    otherwise.
    """
    est = np.asarray(est, dtype=float)
    se = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    pos = se > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(pos, est / np.where(pos, se, 1.0), np.where(est == 0, 0.0, np.sign(est) * np.inf))
    p = np.where(pos, 2.0 * ndtr(-np.abs(t)), np.where(est == 0, 1.0, 0.0))
    return se, t, np.clip(p, 0.0, 1.0)


def coef_test(fit: RegressionFit, cov, index: int) -> TestResult:
    cov = np.asarray(cov, dtype=float)
    m = fit.coef.size
    if not 0 <= index < m:
        raise IndexError(f"coefficient index {index} out of range 0..{m - 1}")
    if cov[index, index] < 0:
        raise ValueError("negative variance on the covariance diagonal")
    se, t, p = studentize(fit.coef[index], cov[index, index])
    return TestResult(index, float(fit.coef[index]), float(se), float(t), float(p))


# ---------------------------------------------------------------------------
# Batched fits with listwise deletion
# ---------------------------------------------------------------------------


@dataclass
class BatchFit:
    """Column-wise OLS + HAC results for ``Y`` of shape (T, P).

    Rows of ``coef`` etc. are NaN where ``status`` is not ``"ok"``.
    """

    coef: np.ndarray
    se: np.ndarray
    tstat: np.ndarray
    pvalue: np.ndarray
    nobs: np.ndarray
    status: list[str]
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> np.ndarray:
        return np.array([s == "ok" for s in self.status], dtype=bool)


def batch_fit(Y, X, opts: HacOptions = HacOptions()) -> BatchFit:
    """Regress every column of ``Y`` on ``X`` using its non-missing rows.

    Columns sharing the same missing-data pattern are fitted together.
    Columns whose sample is too short or ill-conditioned get a status
    string describing the reason instead of raising.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    T, P = Y.shape
    m = X.shape[1]
    coef = np.full((P, m), np.nan)
    se = np.full((P, m), np.nan)
    tstat = np.full((P, m), np.nan)
    pval = np.full((P, m), np.nan)
    nobs = np.zeros(P, dtype=int)
    status = ["ok"] * P
    messages: list[str] = []
    if P == 0:
        return BatchFit(coef, se, tstat, pval, nobs, status, messages)

    present = ~np.isnan(Y.T)
    keys, inverse = np.unique(np.packbits(present, axis=1), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g in range(keys.shape[0]):
        cols = np.flatnonzero(inverse == g)
        rows = present[cols[0]]
        Tg = int(rows.sum())
        nobs[cols] = Tg
        Xg = X[rows]
        try:
            xtx = _check_design(Xg)
            Yg = Y[rows][:, cols]
            b = np.linalg.solve(xtx, Xg.T @ Yg)
            resid = (Yg - Xg @ b).T
            cov, info = hac_batch(Xg, resid, opts)
        except RegressionError as exc:
            for c in cols:
                status[c] = f"excluded: {exc}"
            continue
        messages.extend(info.messages)
        coef[cols] = b.T
        s, t, p = studentize(b.T, np.einsum("pii->pi", cov))
        se[cols], tstat[cols], pval[cols] = s, t, p
    return BatchFit(coef, se, tstat, pval, nobs, status, messages)


@dataclass(frozen=True)
class StockExposure:
    betas: np.ndarray
    tests: tuple[TestResult, ...]
    significant: np.ndarray
    nobs: int


def stock_factor_fit(returns, factors, rf, opts: HacOptions = HacOptions(), level: float = 0.05) -> StockExposure:
    """Excess-return regression of one stock on intercept + K factors.

    Dates where the stock return is missing are dropped.
    """
    r = np.asarray(returns, dtype=float)
    F = np.asarray(factors, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    y = r - np.asarray(rf, dtype=float)
    keep = ~np.isnan(y)
    X = np.column_stack([np.ones(keep.sum()), F[keep]])
    fit = ols_fit(y[keep], X)
    cov = hac_covariance(fit, X, opts)
    tests = tuple(coef_test(fit, cov, k) for k in range(1, X.shape[1]))
    sig = np.array([t.pvalue < level for t in tests])
    return StockExposure(fit.coef[1:].copy(), tests, sig, int(keep.sum()))
