"""Period-level arrival and service data: parsing, validation and calendar arithmetic.

Files are comma-delimited with a header row and ISO-8601 dates::

    arrivals.csv  date,period,count
    services.csv  date,period,mean_service_minutes,n_calls
    calendar.csv  date,is_outlier,delivery_1,...,delivery_21,billing_1,...,billing_21

The working week runs Sunday (weekday 1) through Friday (weekday 6).
Saturdays are structurally absent. Closed days are simply missing rows,
so calendar gaps between the remaining days are preserved.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CYCLES = (1, 7, 14, 21)
DELIVERY_COLUMNS = tuple(f"delivery_{c}" for c in CYCLES)
BILLING_COLUMNS = tuple(f"billing_{c}" for c in CYCLES)
CALENDAR_COLUMNS = ("date", "is_outlier") + DELIVERY_COLUMNS + BILLING_COLUMNS

WEEKDAY_NAMES = ("Sunday", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday")


class DataError(ValueError):
    """Base class for input validation failures."""


class MalformedRow(DataError):
    pass


class DuplicateCell(DataError):
    pass


class RaggedDay(DataError):
    pass


class NonDivisor(DataError):
    pass


def weekday_index(date: dt.date) -> int:
    """Sunday=1 ... Friday=6. Saturday raises MalformedRow."""
    idx = (date.weekday() + 1) % 7 + 1
    if idx == 7:
        raise MalformedRow(f"{date.isoformat()} is a Saturday")
    return idx


def _parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise MalformedRow(f"bad date {text!r}") from exc


def _parse_flag(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "t", "yes"):
        return True
    if t in ("0", "false", "f", "no", ""):
        return False
    raise MalformedRow(f"bad flag value {text!r}")


@dataclass(frozen=True)
class CalendarDay:
    date: dt.date
    is_outlier: bool = False
    delivery_flags: tuple[bool, bool, bool, bool] = (False, False, False, False)
    billing_flags: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def __post_init__(self):
        weekday_index(self.date)
        if len(self.delivery_flags) != 4 or len(self.billing_flags) != 4:
            raise MalformedRow("delivery/billing flags need one entry per cycle")

    @property
    def weekday_index(self) -> int:
        return weekday_index(self.date)

    @property
    def global_delivery(self) -> bool:
        return any(self.delivery_flags)

    def flag(self, name: str) -> bool:
        """Look up an exogenous indicator by its column name."""
        if name == "global_delivery":
            return self.global_delivery
        if name in DELIVERY_COLUMNS:
            return self.delivery_flags[DELIVERY_COLUMNS.index(name)]
        if name in BILLING_COLUMNS:
            return self.billing_flags[BILLING_COLUMNS.index(name)]
        raise KeyError(name)


def true_date_gap(a: CalendarDay | dt.date, b: CalendarDay | dt.date) -> int:
    """Absolute distance in calendar days, closed and excluded days included."""
    da = a.date if isinstance(a, CalendarDay) else a
    db = b.date if isinstance(b, CalendarDay) else b
    return abs((db - da).days)


def gap_matrix(days: Sequence[CalendarDay], others: Sequence[CalendarDay] | None = None) -> np.ndarray:
    """Pairwise true-date gaps between two day sequences (defaults to ``days`` itself)."""
    a = np.array([d.date.toordinal() for d in days], dtype=float)
    b = a if others is None else np.array([d.date.toordinal() for d in others], dtype=float)
    return np.abs(a[:, None] - b[None, :])


def _check_days(days: Sequence[CalendarDay]) -> None:
    for prev, nxt in zip(days, days[1:]):
        if nxt.date <= prev.date:
            raise MalformedRow(f"days not strictly increasing at {nxt.date.isoformat()}")


@dataclass(frozen=True)
class PeriodSeries:
    """D days by K periods of arrival counts."""

    days: tuple[CalendarDay, ...]
    counts: np.ndarray
    period_minutes: int = 30

    def __post_init__(self):
        counts = np.asarray(self.counts)
        object.__setattr__(self, "days", tuple(self.days))
        object.__setattr__(self, "counts", counts)
        self.validate()

    def validate(self) -> "PeriodSeries":
        c = self.counts
        if c.ndim != 2 or c.shape[0] != len(self.days):
            raise RaggedDay(f"counts shape {c.shape} does not match {len(self.days)} days")
        if c.shape[1] < 1:
            raise RaggedDay("need at least one period per day")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise MalformedRow("counts must be finite and non-negative")
        if self.period_minutes <= 0:
            raise DataError("period_minutes must be positive")
        _check_days(self.days)
        return self

    @property
    def D(self) -> int:
        return len(self.days)

    @property
    def K(self) -> int:
        return self.counts.shape[1]

    @property
    def dates(self) -> list[dt.date]:
        return [d.date for d in self.days]

    def index_of(self, date: dt.date) -> int:
        for i, d in enumerate(self.days):
            if d.date == date:
                return i
        raise KeyError(date.isoformat())

    def select(self, mask: Iterable[bool]) -> "PeriodSeries":
        mask = np.asarray(list(mask), dtype=bool)
        days = tuple(d for d, m in zip(self.days, mask) if m)
        return replace(self, days=days, counts=self.counts[mask])

    def between(self, start: dt.date | None, end: dt.date | None) -> "PeriodSeries":
        """Days with start <= date <= end (either bound may be None)."""
        return self.select(
            (start is None or d.date >= start) and (end is None or d.date <= end) for d in self.days
        )

    def regular(self) -> "PeriodSeries":
        return self.select(not d.is_outlier for d in self.days)

    def with_calendar(self, calendar: Mapping[dt.date, CalendarDay]) -> "PeriodSeries":
        days = tuple(calendar.get(d.date, d) for d in self.days)
        return replace(self, days=days)


@dataclass(frozen=True)
class ServiceSeries:
    """D days by K periods of mean service times in minutes."""

    days: tuple[CalendarDay, ...]
    mean_service_time: np.ndarray
    period_minutes: int = 30
    n_calls: np.ndarray | None = field(default=None)

    def __post_init__(self):
        z = np.asarray(self.mean_service_time, dtype=float)
        object.__setattr__(self, "days", tuple(self.days))
        object.__setattr__(self, "mean_service_time", z)
        if z.ndim != 2 or z.shape[0] != len(self.days):
            raise RaggedDay(f"service grid shape {z.shape} does not match {len(self.days)} days")
        if not np.all(np.isfinite(z)) or np.any(z <= 0):
            raise MalformedRow("mean service times must be strictly positive")
        _check_days(self.days)

    @property
    def D(self) -> int:
        return len(self.days)

    @property
    def K(self) -> int:
        return self.mean_service_time.shape[1]

    def select(self, mask: Iterable[bool]) -> "ServiceSeries":
        mask = np.asarray(list(mask), dtype=bool)
        days = tuple(d for d, m in zip(self.days, mask) if m)
        n = None if self.n_calls is None else self.n_calls[mask]
        return replace(self, days=days, mean_service_time=self.mean_service_time[mask], n_calls=n)

    def between(self, start: dt.date | None, end: dt.date | None) -> "ServiceSeries":
        return self.select(
            (start is None or d.date >= start) and (end is None or d.date <= end) for d in self.days
        )

    def regular(self) -> "ServiceSeries":
        return self.select(not d.is_outlier for d in self.days)

    def with_calendar(self, calendar: Mapping[dt.date, CalendarDay]) -> "ServiceSeries":
        return replace(self, days=tuple(calendar.get(d.date, d) for d in self.days))


# ---------------------------------------------------------------------------
# readers / writers


def _read_rows(path: Path, required: Sequence[str]) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise MalformedRow(f"{path}: missing columns {missing}")
        return list(reader)


def _grid_from_rows(rows, value_key: str, path, parse_value, K: int | None):
    cells: dict[dt.date, dict[int, float]] = {}
    for lineno, row in enumerate(rows, start=2):
        date = _parse_date(row["date"])
        weekday_index(date)
        try:
            period = int(row["period"])
            value = parse_value(row[value_key])
        except (TypeError, ValueError) as exc:
            raise MalformedRow(f"{path}:{lineno}: {exc}") from exc
        if period < 1:
            raise MalformedRow(f"{path}:{lineno}: period must be >= 1")
        day = cells.setdefault(date, {})
        if period in day:
            raise DuplicateCell(f"{path}:{lineno}: duplicate cell ({date.isoformat()}, {period})")
        day[period] = value
    if not cells:
        raise MalformedRow(f"{path}: no data rows")
    if K is None:
        K = max(max(day) for day in cells.values())
    dates = sorted(cells)
    grid = np.empty((len(dates), K))
    for i, date in enumerate(dates):
        day = cells[date]
        if sorted(day) != list(range(1, K + 1)):
            raise RaggedDay(f"{path}: {date.isoformat()} has periods {sorted(day)}, expected 1..{K}")
        grid[i] = [day[k] for k in range(1, K + 1)]
    return dates, grid


def _parse_count(text: str) -> int:
    value = float(text)
    if value < 0 or value != int(value):
        raise ValueError(f"count must be a non-negative integer, got {text!r}")
    return int(value)


def _parse_positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise ValueError(f"value must be positive, got {text!r}")
    return value


def load_calendar(path: Path) -> dict[dt.date, CalendarDay]:
    rows = _read_rows(path, CALENDAR_COLUMNS)
    out: dict[dt.date, CalendarDay] = {}
    for lineno, row in enumerate(rows, start=2):
        date = _parse_date(row["date"])
        if date in out:
            raise DuplicateCell(f"{path}:{lineno}: duplicate calendar date {date.isoformat()}")
        out[date] = CalendarDay(
            date=date,
            is_outlier=_parse_flag(row["is_outlier"]),
            delivery_flags=tuple(_parse_flag(row[c]) for c in DELIVERY_COLUMNS),
            billing_flags=tuple(_parse_flag(row[c]) for c in BILLING_COLUMNS),
        )
    return out


def load_period_series(
    path: Path,
    schema: Mapping[str, str] | None = None,
    K: int | None = None,
    period_minutes: int = 30,
    calendar: Mapping[dt.date, CalendarDay] | None = None,
) -> PeriodSeries:
    """Read ``date,period,count`` rows into a validated PeriodSeries.

    ``schema`` maps the canonical names (date, period, count) to the column
    names actually used in the file.
    """
    schema = {"date": "date", "period": "period", "count": "count", **(schema or {})}
    rows = _read_rows(path, list(schema.values()))
    rows = [{k: r[v] for k, v in schema.items()} for r in rows]
    dates, grid = _grid_from_rows(rows, "count", path, _parse_count, K)
    calendar = calendar or {}
    days = tuple(calendar.get(d, CalendarDay(d)) for d in dates)
    return PeriodSeries(days=days, counts=grid.astype(np.int64), period_minutes=period_minutes)


def load_service_series(
    path: Path,
    K: int | None = None,
    period_minutes: int = 30,
    calendar: Mapping[dt.date, CalendarDay] | None = None,
) -> ServiceSeries:
    rows = _read_rows(path, ("date", "period", "mean_service_minutes"))
    dates, grid = _grid_from_rows(rows, "mean_service_minutes", path, _parse_positive, K)
    n_calls = None
    if rows and "n_calls" in rows[0] and all(r["n_calls"].strip() for r in rows):
        _, n_calls = _grid_from_rows(rows, "n_calls", path, float, grid.shape[1])
    calendar = calendar or {}
    days = tuple(calendar.get(d, CalendarDay(d)) for d in dates)
    return ServiceSeries(days=days, mean_service_time=grid, period_minutes=period_minutes, n_calls=n_calls)


def write_period_series(series: PeriodSeries, path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "period", "count"])
        for day, row in zip(series.days, series.counts):
            for k, c in enumerate(row, start=1):
                w.writerow([day.date.isoformat(), k, int(c)])


def write_service_series(series: ServiceSeries, path: Path) -> None:
    n = series.n_calls
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "period", "mean_service_minutes", "n_calls"])
        for i, (day, row) in enumerate(zip(series.days, series.mean_service_time)):
            for k, z in enumerate(row, start=1):
                calls = "" if n is None else int(n[i, k - 1])
                w.writerow([day.date.isoformat(), k, f"{z:.6f}", calls])


def write_calendar(days: Iterable[CalendarDay], path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CALENDAR_COLUMNS)
        for d in days:
            w.writerow(
                [d.date.isoformat(), int(d.is_outlier)]
                + [int(f) for f in d.delivery_flags]
                + [int(f) for f in d.billing_flags]
            )


# ---------------------------------------------------------------------------
# resolution changes


def aggregate_resolution(s: PeriodSeries, factor: int) -> PeriodSeries:
    """Sum counts over consecutive blocks of ``factor`` periods."""
    if factor < 1 or s.K % factor:
        raise NonDivisor(f"factor {factor} does not divide K={s.K}")
    counts = s.counts.reshape(s.D, s.K // factor, factor).sum(axis=2)
    return PeriodSeries(days=s.days, counts=counts, period_minutes=s.period_minutes * factor)


def disaggregate_forecast(f, factor: int) -> np.ndarray:
    """Split a coarse-period forecast equally over ``factor`` sub-periods.

    A scalar gives ``factor`` values; an array of shape (..., K') gives
    shape (..., K' * factor).
    """
    if factor < 1:
        raise NonDivisor("factor must be >= 1")
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(factor, f / factor)
    return np.repeat(f / factor, factor, axis=-1)
