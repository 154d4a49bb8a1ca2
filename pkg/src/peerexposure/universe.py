"""Green / brown peer-group formation from lagged GHG intensities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .market_data import DataError, GhgHistory, month_end, to_date

MIN_UNIVERSE = 8


class GroupFormationError(DataError):
    reason = "group formation failed"


@dataclass(frozen=True)
class GhgSnapshot:
    eval_date: np.datetime64
    intensity: dict[str, float]
    source_year: dict[str, int]

    @property
    def universe(self) -> tuple[str, ...]:
        return tuple(sorted(self.intensity))

    def __len__(self) -> int:
        return len(self.intensity)

    def restrict(self, firms: Iterable[str]) -> "GhgSnapshot":
        keep = set(firms)
        return GhgSnapshot(
            self.eval_date,
            {f: v for f, v in self.intensity.items() if f in keep},
            {f: v for f, v in self.source_year.items() if f in keep},
        )


@dataclass(frozen=True)
class PeerGroup:
    label: str
    eval_date: np.datetime64
    members: tuple[str, ...]

    @property
    def N(self) -> int:
        return len(self.members)


def availability_date(fiscal_year: int, lag_months: int) -> np.datetime64:
    """Fiscal-year end (31 December) shifted forward by ``lag_months``."""
    fy_end_month = np.datetime64(f"{fiscal_year:04d}-12", "M")
    return month_end(fy_end_month + lag_months)


def latest_intensity(history: GhgHistory, eval_date, lag_months: int = 12) -> GhgSnapshot:
    """Latest GHG intensity per firm that is public at ``eval_date``."""
    if lag_months < 0:
        raise DataError(f"lag_months must be >= 0, got {lag_months}")
    d = to_date(eval_date)
    intensity: dict[str, float] = {}
    year: dict[str, int] = {}
    # records are sorted by (firm, fiscal_year), so later years overwrite
    for r in history.records:
        if availability_date(r.fiscal_year, lag_months) <= d:
            intensity[r.firm] = r.intensity
            year[r.firm] = r.fiscal_year
    return GhgSnapshot(d, intensity, year)


def form_peer_groups(
    snapshot: GhgSnapshot, lower_q: float = 0.25, upper_q: float = 0.75
) -> tuple[PeerGroup, PeerGroup]:
    """Return ``(green, brown)`` groups of equal size ``floor(lower_q * M)``.

    Firms are ranked by (intensity, firm id); green takes the first ``n``,
    brown the last ``n``. ``upper_q`` only enters the precondition.
    """
    if not 0 < lower_q < upper_q < 1:
        raise GroupFormationError(
            f"quantiles must satisfy 0 < lower_q < upper_q < 1, got {lower_q}, {upper_q}"
        )
    M = len(snapshot)
    if M < MIN_UNIVERSE:
        raise GroupFormationError(f"universe of {M} firms is below the minimum of {MIN_UNIVERSE}")
    n = math.floor(lower_q * M)
    if n == 0:
        raise GroupFormationError(f"lower_q={lower_q} yields empty groups for M={M}")
    # one total order: intensity, then firm id
    ranked = sorted(snapshot.intensity, key=lambda f: (snapshot.intensity[f], f))
    green = tuple(sorted(ranked[:n]))
    brown = tuple(sorted(ranked[M - n :]))
    if set(green) & set(brown):
        raise GroupFormationError("green and brown groups overlap")
    return (
        PeerGroup("green", snapshot.eval_date, green),
        PeerGroup("brown", snapshot.eval_date, brown),
    )
