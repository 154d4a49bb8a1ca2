"""Factor-exposure heterogeneity within green and brown peer groups."""

__version__ = "0.1.0"

from .market_data import (  # noqa: E402
    DataError,
    EvaluationWindow,
    FactorSeries,
    GhgHistory,
    ReturnPanel,
    TradingCalendar,
    build_window,
    load_factors,
    load_ghg,
    load_returns,
)
from .pipeline import RunConfig, run_month, run_series, write_outputs  # noqa: E402
from .regression import HacOptions, coef_test, hac_covariance, ols_fit, qs_kernel  # noqa: E402
from .screening import estimate_pi0, pairwise_sweep  # noqa: E402
from .universe import form_peer_groups, latest_intensity  # noqa: E402

__all__ = [
    "DataError",
    "EvaluationWindow",
    "FactorSeries",
    "GhgHistory",
    "HacOptions",
    "ReturnPanel",
    "RunConfig",
    "TradingCalendar",
    "build_window",
    "coef_test",
    "estimate_pi0",
    "form_peer_groups",
    "hac_covariance",
    "latest_intensity",
    "load_factors",
    "load_ghg",
    "load_returns",
    "ols_fit",
    "pairwise_sweep",
    "qs_kernel",
    "run_month",
    "run_series",
    "write_outputs",
]
