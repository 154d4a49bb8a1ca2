"""Ingestion and alignment of stock returns, factor returns and GHG reports.

All loaded structures are immutable after construction; arrays are marked
read-only so they can be shared freely between worker threads.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FACTORS = ("MKT", "SMB", "HML", "RMW", "CMA", "MOM")
VALID_HORIZONS = (3, 6, 12)


class DataError(ValueError):
    """Raised for any input-file or input-data contract violation."""


class MalformedRowError(DataError):
    def __init__(self, path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}: line {line}: {reason}")


class DuplicateRecordError(DataError):
    def __init__(self, path, key, line: int | None = None):
        self.path = str(path)
        self.key = key
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{path}: duplicate record for key {key!r}{where}")


class MissingColumnError(DataError):
    def __init__(self, path, column: str):
        self.path = str(path)
        self.column = column
        super().__init__(f"{path}: missing required column {column!r}")


class WindowError(DataError):
    """Base class for evaluation windows that cannot be built."""

    reason = "window error"


class EmptyWindowError(WindowError):
    reason = "empty window"


class IncompleteWindowError(WindowError):
    reason = "incomplete window"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def to_date(value) -> np.datetime64:
    """Coerce ``str`` / ``date`` / ``datetime64`` to ``datetime64[D]``."""
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]")
    if isinstance(value, (dt.date, dt.datetime)):
        return np.datetime64(value.isoformat()[:10], "D")
    return np.datetime64(dt.date.fromisoformat(str(value).strip()).isoformat(), "D")


def month_end(month: np.datetime64) -> np.datetime64:
    """Last calendar day of the month containing ``month``."""
    m = np.datetime64(month, "M")
    return (m + 1).astype("datetime64[D]") - 1


@dataclass(frozen=True)
class TradingCalendar:
    dates: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dates, dtype="datetime64[D]").copy()
        if d.ndim != 1 or d.size == 0:
            raise DataError("trading calendar must be a nonempty 1-D sequence of dates")
        if np.any(np.diff(d) <= np.timedelta64(0, "D")):
            raise DataError("trading calendar must be strictly increasing without duplicates")
        object.__setattr__(self, "dates", _frozen(d))

    def __len__(self) -> int:
        return self.dates.size

    def index_of(self, date) -> int:
        d = to_date(date)
        i = int(np.searchsorted(self.dates, d))
        if i >= self.dates.size or self.dates[i] != d:
            raise DataError(f"{d} is not a trading date")
        return i

    def __contains__(self, date) -> bool:
        d = to_date(date)
        i = int(np.searchsorted(self.dates, d))
        return i < self.dates.size and self.dates[i] == d

    def month_ends(self) -> dict[np.datetime64, np.datetime64]:
        """Map each calendar month present to its last trading date."""
        months = self.dates.astype("datetime64[M]")
        last = np.flatnonzero(np.r_[months[1:] != months[:-1], True])
        return {months[i]: self.dates[i] for i in last}


@dataclass(frozen=True)
class ReturnPanel:
    """Daily simple returns; ``values`` is (dates, stocks) with NaN for missing."""

    calendar: TradingCalendar
    stocks: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        stocks = tuple(str(s) for s in self.stocks)
        if len(set(stocks)) != len(stocks):
            raise DataError("stock identifiers must be unique")
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.calendar), len(stocks)):
            raise DataError(
                f"return matrix shape {v.shape} does not match "
                f"({len(self.calendar)}, {len(stocks)})"
            )
        if np.isinf(v).any():
            raise DataError("returns must be finite where present")
        object.__setattr__(self, "stocks", stocks)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def column(self, stock: str) -> np.ndarray:
        return self.values[:, self.stocks.index(stock)]


@dataclass(frozen=True)
class FactorSeries:
    calendar: TradingCalendar
    names: tuple[str, ...]
    values: np.ndarray
    rf: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise DataError("at least one factor is required")
        if len(set(names)) != len(names):
            raise DataError("factor names must be unique")
        v = np.array(self.values, dtype=float)
        rf = np.array(self.rf, dtype=float)
        if v.shape != (len(self.calendar), len(names)) or rf.shape != (len(self.calendar),):
            raise DataError("factor matrix / rf shape does not match calendar")
        if not (np.isfinite(v).all() and np.isfinite(rf).all()):
            raise DataError("factor series may not contain missing values")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "rf", _frozen(rf))

    @property
    def K(self) -> int:
        return len(self.names)

    def design(self, rows=slice(None)) -> np.ndarray:
        """Intercept column followed by the factor returns."""
        f = self.values[rows]
        return np.column_stack([np.ones(f.shape[0]), f])


@dataclass(frozen=True)
class GhgRecord:
    firm: str
    fiscal_year: int
    intensity: float
    co2e_tonnes: float | None = None
    revenue: float | None = None


@dataclass(frozen=True)
class GhgHistory:
    records: tuple[GhgRecord, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: (r.firm, r.fiscal_year)))
        index: dict[tuple[str, int], GhgRecord] = {}
        for r in recs:
            key = (r.firm, r.fiscal_year)
            if key in index:
                raise DuplicateRecordError("<ghg>", key)
            if not (r.intensity >= 0 and math.isfinite(r.intensity)):
                raise DataError(f"intensity for {key} must be finite and >= 0")
            index[key] = r
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, firm: str, fiscal_year: int) -> GhgRecord:
        return self._index[(firm, fiscal_year)]

    @property
    def firms(self) -> tuple[str, ...]:
        return tuple(sorted({r.firm for r in self.records}))


@dataclass(frozen=True)
class EvaluationWindow:
    """Forward-looking sample after ``eval_date``.

    ``start:stop`` indexes the shared calendar. ``returns`` holds the raw
    returns of every panel stock over the window; ``included`` flags the
    stocks passing the coverage screen.
    """

    eval_date: np.datetime64
    horizon: int
    dates: np.ndarray
    start: int
    stop: int
    stocks: tuple[str, ...]
    returns: np.ndarray
    factors: np.ndarray
    rf: np.ndarray
    coverage: np.ndarray
    included: np.ndarray

    @property
    def T(self) -> int:
        return self.dates.size

    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.T), self.factors])

    def included_stocks(self) -> tuple[str, ...]:
        return tuple(s for s, ok in zip(self.stocks, self.included) if ok)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _open_rows(path) -> tuple[list[str], Iterable[tuple[int, list[str]]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    fh = path.open(newline="")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise DataError(f"{path}: empty file") from None
    header = [h.strip() for h in header]

    def rows():
        with fh:
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                yield reader.line_num, row

    return header, rows()


def _require(path, header: Sequence[str], columns: Sequence[str]) -> dict[str, int]:
    pos = {}
    for c in columns:
        if c not in header:
            raise MissingColumnError(path, c)
        pos[c] = header.index(c)
    return pos


def _parse_float(path, line: int, text: str, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise MalformedRowError(path, line, f"cannot parse {what} {text!r}") from None
    if not math.isfinite(x):
        raise MalformedRowError(path, line, f"non-finite {what} {text!r}")
    return x


def _parse_date(path, line: int, text: str) -> np.datetime64:
    try:
        return to_date(text)
    except ValueError:
        raise MalformedRowError(path, line, f"unparseable date {text!r}") from None


def load_returns(path) -> ReturnPanel:
    """Read a long CSV ``date,stock_id,ret`` into a :class:`ReturnPanel`.

    Exact duplicate rows are collapsed; duplicates with a different value
    raise :class:`DuplicateRecordError`. Empty ``ret`` cells mean missing.
    """
    header, rows = _open_rows(path)
    pos = _require(path, header, ("date", "stock_id", "ret"))
    width = max(pos.values()) + 1
    cells: dict[tuple[np.datetime64, str], float] = {}
    for line, row in rows:
        if len(row) < width:
            raise MalformedRowError(path, line, f"expected {len(header)} fields, got {len(row)}")
        d = _parse_date(path, line, row[pos["date"]])
        sid = row[pos["stock_id"]].strip()
        if not sid:
            raise MalformedRowError(path, line, "empty stock_id")
        text = row[pos["ret"]].strip()
        value = math.nan if text == "" else _parse_float(path, line, text, "return")
        key = (d, sid)
        if key in cells:
            old = cells[key]
            same = (math.isnan(old) and math.isnan(value)) or old == value
            if not same:
                raise DuplicateRecordError(path, (str(d), sid), line)
            continue
        cells[key] = value
    if not cells:
        raise DataError(f"{path}: no data rows")
    dates = np.array(sorted({k[0] for k in cells}), dtype="datetime64[D]")
    stocks = tuple(sorted({k[1] for k in cells}))
    di = {d: i for i, d in enumerate(dates)}
    si = {s: j for j, s in enumerate(stocks)}
    values = np.full((dates.size, len(stocks)), np.nan)
    for (d, s), v in cells.items():
        values[di[d], si[s]] = v
    return ReturnPanel(TradingCalendar(dates), stocks, values)


def write_returns(panel: ReturnPanel, path) -> None:
    """Write ``panel`` in the long CSV format (missing cells omitted)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "stock_id", "ret"])
        for t, d in enumerate(panel.calendar.dates):
            ds = str(d)
            row = panel.values[t]
            for j, s in enumerate(panel.stocks):
                if not np.isnan(row[j]):
                    w.writerow([ds, s, repr(float(row[j]))])


def load_factors(path, units: str = "decimal", names: Sequence[str] = DEFAULT_FACTORS) -> FactorSeries:
    """Read a wide factor CSV ``date,<factors...>,RF``.

    ``units="percent"`` divides every factor and RF value by 100.
    """
    if units not in ("decimal", "percent"):
        raise DataError(f"unknown factor units {units!r}; expected 'decimal' or 'percent'")
    header, rows = _open_rows(path)
    pos = _require(path, header, ("date", *names, "RF"))
    width = max(pos.values()) + 1
    dates, values, rf = [], [], []
    for line, row in rows:
        if len(row) < width:
            raise MalformedRowError(path, line, f"expected {len(header)} fields, got {len(row)}")
        dates.append(_parse_date(path, line, row[pos["date"]]))
        vals = []
        for c in (*names, "RF"):
            text = row[pos[c]].strip()
            if text == "":
                raise MalformedRowError(path, line, f"missing value in column {c!r}")
            vals.append(_parse_float(path, line, text, c))
        values.append(vals[:-1])
        rf.append(vals[-1])
    if not dates:
        raise DataError(f"{path}: no data rows")
    order = np.argsort(np.array(dates, dtype="datetime64[D]"), kind="stable")
    d = np.array(dates, dtype="datetime64[D]")[order]
    if np.any(d[1:] == d[:-1]):
        dup = d[1:][d[1:] == d[:-1]][0]
        raise DuplicateRecordError(path, str(dup))
    v = np.array(values, dtype=float)[order]
    r = np.array(rf, dtype=float)[order]
    if units == "percent":
        v, r = v / 100.0, r / 100.0
    return FactorSeries(TradingCalendar(d), tuple(names), v, r)


def load_ghg(path) -> GhgHistory:
    """Read GHG reports, deriving intensity as ``co2e_tonnes / revenue`` if absent."""
    header, rows = _open_rows(path)
    base = _require(path, header, ("firm_id", "fiscal_year"))
    if "intensity" in header:
        mode = "intensity"
        pos = {**base, **_require(path, header, ("intensity",))}
    else:
        mode = "raw"
        pos = {**base, **_require(path, header, ("co2e_tonnes", "revenue"))}
    width = max(pos.values()) + 1
    seen: dict[tuple[str, int], int] = {}
    records = []
    for line, row in rows:
        if len(row) < width:
            raise MalformedRowError(path, line, f"expected {len(header)} fields, got {len(row)}")
        firm = row[pos["firm_id"]].strip()
        if not firm:
            raise MalformedRowError(path, line, "empty firm_id")
        try:
            year = int(row[pos["fiscal_year"]].strip())
        except ValueError:
            raise MalformedRowError(path, line, f"bad fiscal_year {row[pos['fiscal_year']]!r}") from None
        key = (firm, year)
        if key in seen:
            raise DuplicateRecordError(path, key, line)
        seen[key] = line
        if mode == "intensity":
            x = _parse_float(path, line, row[pos["intensity"]], "intensity")
            if x < 0:
                raise MalformedRowError(path, line, f"negative intensity {x}")
            records.append(GhgRecord(firm, year, x))
        else:
            co2 = _parse_float(path, line, row[pos["co2e_tonnes"]], "co2e_tonnes")
            rev = _parse_float(path, line, row[pos["revenue"]], "revenue")
            if co2 < 0:
                raise MalformedRowError(path, line, f"negative emissions {co2}")
            if rev <= 0:
                raise MalformedRowError(path, line, f"nonpositive revenue {rev}")
            records.append(GhgRecord(firm, year, co2 / rev, co2, rev))
    return GhgHistory(tuple(records))


def write_factors(factors: FactorSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *factors.names, "RF"])
        for t, d in enumerate(factors.calendar.dates):
            w.writerow([str(d), *(repr(float(x)) for x in factors.values[t]), repr(float(factors.rf[t]))])


def write_ghg(history: GhgHistory, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["firm_id", "fiscal_year", "intensity"])
        for r in history.records:
            w.writerow([r.firm, r.fiscal_year, repr(float(r.intensity))])


# ---------------------------------------------------------------------------
# Alignment and windows
# ---------------------------------------------------------------------------


def align_returns(panel: ReturnPanel, calendar: TradingCalendar) -> ReturnPanel:
    """Re-index ``panel`` onto ``calendar``; dates absent from it are dropped."""
    if np.array_equal(panel.calendar.dates, calendar.dates):
        return panel
    src = panel.calendar.dates
    idx = np.searchsorted(src, calendar.dates)
    idx_c = np.minimum(idx, src.size - 1)
    hit = src[idx_c] == calendar.dates
    dropped = np.setdiff1d(src, calendar.dates).size
    if dropped:
        logger.warning("%d return dates are not in the factor calendar and were dropped", dropped)
    values = np.full((len(calendar), len(panel.stocks)), np.nan)
    values[hit] = panel.values[idx_c[hit]]
    return ReturnPanel(calendar, panel.stocks, values)


def window_bounds(calendar: TradingCalendar, eval_date, h: int) -> tuple[int, int]:
    """Calendar slice ``[start, stop)`` of the ``h``-month forward window."""
    if h < 1:
        raise DataError(f"horizon must be a positive number of months, got {h}")
    i = calendar.index_of(eval_date)
    d = calendar.dates
    target = np.datetime64(d[i], "M") + h
    last = month_end(target)
    stop = int(np.searchsorted(d, last, side="right"))
    start = i + 1
    if stop <= start:
        raise EmptyWindowError(f"empty window after {d[i]} for h={h}")
    if d[-1] < target.astype("datetime64[D]"):
        raise IncompleteWindowError(
            f"data end {d[-1]} precedes month {target} needed by the h={h} window after {d[i]}"
        )
    return start, stop


def build_window(
    panel: ReturnPanel,
    factors: FactorSeries,
    eval_date,
    h: int,
    min_coverage: float = 0.9,
    stocks: Sequence[str] | None = None,
) -> EvaluationWindow:
    """Slice the forward window and apply the per-stock coverage screen.

    ``panel`` must already be aligned on ``factors.calendar``. ``stocks``
    restricts the window to a subset of panel columns (in the given order).
    """
    if not 0 < min_coverage <= 1:
        raise DataError(f"min_coverage must be in (0, 1], got {min_coverage}")
    if not np.array_equal(panel.calendar.dates, factors.calendar.dates):
        panel = align_returns(panel, factors.calendar)
    start, stop = window_bounds(factors.calendar, eval_date, h)
    if stocks is None:
        cols = np.arange(len(panel.stocks))
        names = panel.stocks
    else:
        lookup = {s: j for j, s in enumerate(panel.stocks)}
        missing = [s for s in stocks if s not in lookup]
        if missing:
            raise DataError(f"stocks not in return panel: {missing[:5]}")
        cols = np.array([lookup[s] for s in stocks], dtype=int)
        names = tuple(stocks)
    r = panel.values[start:stop][:, cols]
    coverage = (~np.isnan(r)).mean(axis=0) if r.size else np.zeros(len(names))
    return EvaluationWindow(
        eval_date=to_date(eval_date),
        horizon=h,
        dates=factors.calendar.dates[start:stop],
        start=start,
        stop=stop,
        stocks=tuple(names),
        returns=_frozen(np.array(r)),
        factors=factors.values[start:stop],
        rf=factors.rf[start:stop],
        coverage=_frozen(coverage),
        included=_frozen(coverage >= min_coverage - 1e-12),
    )
