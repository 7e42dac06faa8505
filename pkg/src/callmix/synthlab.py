"""Synthetic ground truth: count datasets drawn from the mixed-model family,
service-time grids, and a customer-level Erlang-A (M/M/N+M) simulator.

All randomness comes from numpy's MT19937 bit generator so a seed pins the
output on every platform.
"""

from __future__ import annotations

import datetime as dt
import heapq
from dataclasses import dataclass, field

import numpy as np

from .dataio import CYCLES, CalendarDay, PeriodSeries, ServiceSeries, weekday_index
from .designspace import arma11_kernel, ar1_kernel, unit_gaps


class InvalidConfig(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.MT19937(int(seed) & 0xFFFFFFFFFFFFFFFF))


def working_days(start: dt.date, n: int) -> list[dt.date]:
    """The first ``n`` non-Saturday dates on or after ``start``."""
    out, d = [], start
    while len(out) < n:
        if d.weekday() != 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def billing_calendar(dates: list[dt.date], outliers: frozenset[int] = frozenset()) -> list[CalendarDay]:
    """A stylized billing schedule.

    For cycle c the delivery period is the first two working days on or
    after day c of the month and the billing day is the first working day
    a week after the delivery period starts.
    """
    delivery = {c: set() for c in CYCLES}
    billing = {c: set() for c in CYCLES}
    months = sorted({(d.year, d.month) for d in dates})
    for y, m in months:
        for c in CYCLES:
            start = dt.date(y, m, c)
            delivery[c].update(working_days(start, 2))
            billing[c].update(working_days(start + dt.timedelta(days=7), 1))
    days = []
    for i, d in enumerate(dates):
        days.append(
            CalendarDay(
                d,
                is_outlier=i in outliers,
                delivery_flags=tuple(d in delivery[c] for c in CYCLES),
                billing_flags=tuple(d in billing[c] for c in CYCLES),
            )
        )
    return days


# per-period arrival levels by weekday, Sunday first
_WEEKDAY_LEVEL = np.array([520.0, 500.0, 490.0, 480.0, 470.0, 320.0])


def default_profiles(K: int = 24) -> np.ndarray:
    """6 x K profile of sqrt arrival rates with midday and evening peaks."""
    x = np.linspace(0.0, 1.0, K)
    shape = 1.0 + 0.25 * np.exp(-((x - 0.3) ** 2) / 0.01) + 0.35 * np.exp(-((x - 0.75) ** 2) / 0.01)
    shape /= shape.mean()
    fri = np.linspace(1.4, 0.6, K)
    prof = np.outer(_WEEKDAY_LEVEL, shape)
    prof[5] = _WEEKDAY_LEVEL[5] * fri
    return np.sqrt(prof)


@dataclass
class GeneratorConfig:
    D: int = 60
    K: int = 24
    sigma_G2: float = 1.0
    rho_G: float = 0.6
    sigma_R2: float = 0.8
    rho_R: float = 0.5
    delta: float | None = None  # set for ARMA(1,1) within-day errors
    seed: int = 0
    start: dt.date = dt.date(2004, 1, 4)
    period_minutes: int = 30
    profiles: np.ndarray | None = None
    exogenous_effects: dict[str, float] = field(default_factory=dict)
    outlier_days: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.D < 1 or self.K < 1:
            raise InvalidConfig("D and K must be positive")
        if self.sigma_G2 < 0 or self.sigma_R2 < 0:
            raise InvalidConfig("variances must be non-negative")
        if not (-1 < self.rho_G < 1 and -1 < self.rho_R < 1):
            raise InvalidConfig("correlations must lie in (-1, 1)")
        if self.profiles is not None and np.shape(self.profiles) != (6, self.K):
            raise InvalidConfig(f"profiles must be 6 x {self.K}")
        if self.delta is not None and self.sigma_R2 > 0:
            try:
                arma11_kernel(self.sigma_R2, self.delta, self.rho_R, self.K)
            except np.linalg.LinAlgError as exc:
                raise InvalidConfig(str(exc)) from exc


def _day_effects(rng, dates, sigma2, rho):
    """AR(1) over true-date gaps, sampled sequentially."""
    g = np.zeros(len(dates))
    if sigma2 == 0:
        return g
    g[0] = np.sqrt(sigma2) * rng.standard_normal()
    for i in range(1, len(dates)):
        a = rho ** (dates[i] - dates[i - 1]).days
        g[i] = a * g[i - 1] + np.sqrt(sigma2 * (1 - a * a)) * rng.standard_normal()
    return g


def generate_counts(cfg: GeneratorConfig) -> tuple[PeriodSeries, dict]:
    """Draw counts with sqrt(rate) = fixed + day effect + within-day error, then Poisson.

    Returns the series and the latent pieces (gamma, eps, lam, fixed).
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    dates = working_days(cfg.start, cfg.D)
    days = billing_calendar(dates, frozenset(cfg.outlier_days))
    prof = default_profiles(cfg.K) if cfg.profiles is None else np.asarray(cfg.profiles, dtype=float)
    fixed = np.array([prof[d.weekday_index - 1] for d in days])
    for name, eff in cfg.exogenous_effects.items():
        fixed += eff * np.array([float(d.flag(name)) for d in days])[:, None]
    gamma = _day_effects(rng, dates, cfg.sigma_G2, cfg.rho_G)
    if cfg.sigma_R2 > 0:
        if cfg.delta is None:
            R = ar1_kernel(cfg.sigma_R2, cfg.rho_R, unit_gaps(cfg.K))
        else:
            R = arma11_kernel(cfg.sigma_R2, cfg.delta, cfg.rho_R, cfg.K)
        eps = rng.standard_normal((cfg.D, cfg.K)) @ np.linalg.cholesky(R).T
    else:
        eps = np.zeros((cfg.D, cfg.K))
    root = np.maximum(fixed + gamma[:, None] + eps, 0.1)
    lam = root**2
    counts = rng.poisson(lam)
    series = PeriodSeries(days=tuple(days), counts=counts, period_minutes=cfg.period_minutes)
    return series, {"gamma": gamma, "eps": eps, "lam": lam, "fixed": fixed}


def generate_services(
    days, K: int, seed: int, noise_sd: float = 0.25, trend: float = 0.0, period_minutes: int = 30
) -> ServiceSeries:
    """Quadratic-in-period mean service times (minutes) with a Friday tilt."""
    rng = make_rng(seed)
    days = tuple(days)
    k = np.arange(1, K + 1, dtype=float)
    base = 3.2 + 0.06 * k - 0.003 * k**2
    grid = np.empty((len(days), K))
    for i, d in enumerate(days):
        prof = base - 0.03 * k if d.weekday_index == 6 else base + 0.05 * (d.weekday_index - 3)
        grid[i] = prof + trend * i
    grid += noise_sd * rng.standard_normal(grid.shape)
    grid = np.maximum(grid, 0.2)
    n_calls = rng.poisson(400, size=grid.shape)
    return ServiceSeries(days=days, mean_service_time=grid, period_minutes=period_minutes, n_calls=n_calls)


def sinusoid_counts(D: int, K: int, seed: int, base: float = 120.0, amplitude: float = 0.6,
                    cycles: float = 3.0, period_minutes: int = 15, sigma_G2: float = 0.3,
                    rho_G: float = 0.6) -> PeriodSeries:
    """Counts whose rate oscillates within the day; for resolution comparisons."""
    rng = make_rng(seed)
    dates = working_days(dt.date(2004, 1, 4), D)
    days = billing_calendar(dates)
    x = np.arange(K) / K
    shape = base * (1.0 + amplitude * np.sin(2 * np.pi * cycles * x))
    gamma = _day_effects(rng, dates, sigma_G2, rho_G)
    root = np.maximum(np.sqrt(shape)[None, :] + gamma[:, None], 0.1)
    counts = rng.poisson(root**2)
    return PeriodSeries(days=tuple(days), counts=counts, period_minutes=period_minutes)


# ---------------------------------------------------------------------------
# Erlang-A simulation


@dataclass
class SimulationResult:
    p_wait: float
    p_wait_se: float
    p_ab: float
    p_ab_se: float
    e_wait: float
    e_wait_se: float
    n_measured: int
    arrivals: int
    served: int
    abandoned: int
    in_system_at_end: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else int(v)) for k, v in self.__dict__.items()}


def simulate_erlang_a(
    lam: float,
    mu: float,
    theta: float,
    N: int,
    horizon_minutes: float,
    warmup_minutes: float,
    seed: int,
    n_batches: int = 20,
) -> SimulationResult:
    """First-come-first-served M/M/N+M, customer by customer.

    Each arrival takes the earliest-free server if it frees up before the
    customer's patience runs out, otherwise the customer abandons. Waits
    of abandoning customers are their patience times. Statistics cover
    arrivals after the warmup, with batch-means standard errors.
    """
    if min(lam, mu, theta) <= 0 or N < 1:
        raise ValueError("rates must be positive and N >= 1")
    if horizon_minutes <= warmup_minutes:
        raise ValueError("horizon must exceed warmup")
    rng = make_rng(seed)
    expected = lam * horizon_minutes
    n_draw = int(expected + 10 * np.sqrt(expected) + 100)
    gaps = rng.exponential(1.0 / lam, n_draw)
    t = np.cumsum(gaps)
    while t[-1] < horizon_minutes:
        more = np.cumsum(rng.exponential(1.0 / lam, n_draw)) + t[-1]
        t = np.concatenate([t, more])
    t = t[t <= horizon_minutes]
    n = len(t)
    service = rng.exponential(1.0 / mu, n)
    patience = rng.exponential(1.0 / theta, n)

    free = [0.0] * N
    heapq.heapify(free)
    waited = np.empty(n, dtype=bool)
    abandon = np.empty(n, dtype=bool)
    wait = np.empty(n)
    leave = np.empty(n)
    tl, sl, pl = t.tolist(), service.tolist(), patience.tolist()
    for i in range(n):
        ti = tl[i]
        f = free[0]
        start = f if f > ti else ti
        w = start - ti
        if w <= pl[i]:
            heapq.heapreplace(free, start + sl[i])
            wait[i] = w
            abandon[i] = False
            leave[i] = start + sl[i]
        else:
            wait[i] = pl[i]
            abandon[i] = True
            leave[i] = ti + pl[i]
        waited[i] = w > 0

    done = leave <= horizon_minutes
    served = int(np.sum(done & ~abandon))
    abandoned = int(np.sum(done & abandon))
    in_system = int(np.sum(~done))

    m = t > warmup_minutes
    idx = np.flatnonzero(m)
    batches = np.array_split(idx, n_batches)

    def est(x):
        bm = np.array([x[b].mean() for b in batches if len(b)])
        return float(x[idx].mean()), float(bm.std(ddof=1) / np.sqrt(len(bm)))

    pw, pw_se = est(waited.astype(float))
    pa, pa_se = est(abandon.astype(float))
    ew, ew_se = est(wait)
    return SimulationResult(pw, pw_se, pa, pa_se, ew, ew_se, len(idx), n, served, abandoned, in_system)
