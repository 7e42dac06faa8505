"""From forecasts to headcount, and what forecast error costs in service quality.

Offered load R = calls * mean service / period length. Square-root staffing
N = ceil(R + beta * sqrt(R)). Performance is evaluated two ways: the QED
asymptotic delay probability for the M/M/N+M (Erlang-A) queue, and the exact
birth-death steady state.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from .dataio import PeriodSeries, ServiceSeries
from .gausslik import ForecastSet


class NonPositiveInput(ValueError):
    pass


class InvalidCdf(ValueError):
    pass


class TruncationOverflow(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


def offered_load(lambda_count, mean_service_min, period_minutes: float = 30.0):
    lam = np.asarray(lambda_count, dtype=float)
    s = np.asarray(mean_service_min, dtype=float)
    if np.any(lam <= 0) or np.any(s <= 0) or period_minutes <= 0:
        raise NonPositiveInput("arrivals, service time and period length must be positive")
    R = lam * s / period_minutes
    return float(R) if R.ndim == 0 else R


def stationary_excess_cdf(service_cdf, mean_service: float, t: float, grid_points: int = 2001) -> float:
    """P(S_e <= t) = (1/E S) * integral_0^t (1 - G(u)) du, by the trapezoid rule.

    ``service_cdf`` is either a pair (times, cdf values) tabulated from 0
    upward, or a callable G(u).
    """
    if mean_service <= 0:
        raise InvalidCdf("mean service time must be positive")
    if t <= 0:
        return 0.0
    if callable(service_cdf):
        u = np.linspace(0.0, t, grid_points)
        G = np.asarray(service_cdf(u), dtype=float)
    else:
        times, values = (np.asarray(a, dtype=float) for a in service_cdf)
        if times.shape != values.shape or times.ndim != 1 or len(times) < 2:
            raise InvalidCdf("tabulated cdf needs matching 1-d time and value arrays")
        if np.any(np.diff(times) <= 0):
            raise InvalidCdf("cdf times must be strictly increasing")
        if times[0] > 0:
            times = np.concatenate([[0.0], times])
            values = np.concatenate([[0.0], values])
        u = np.union1d(times[times < t], [t])
        G = np.interp(u, times, values, right=values[-1])
    if np.any(G < -1e-12) or np.any(G > 1 + 1e-12) or np.any(np.diff(G) < -1e-12):
        raise InvalidCdf("cdf values must be non-decreasing within [0, 1]")
    area = np.trapezoid(1.0 - G, u)
    return float(min(max(area / mean_service, 0.0), 1.0))


def sqrt_staff(R: float, beta: float) -> int:
    if R <= 0:
        raise NonPositiveInput("offered load must be positive")
    # guard against 100.00000000000001-style ceilings
    return max(1, int(math.ceil(R + beta * math.sqrt(R) - 1e-9)))


def delta_beta(R_pred: float, R_true: float) -> float:
    """(R_pred - R_true) / sqrt(R_true): shift in the effective quality parameter."""
    if R_pred <= 0 or R_true <= 0:
        raise NonPositiveInput("offered loads must be positive")
    return (R_pred - R_true) / math.sqrt(R_true)


def beta_adjusted(R_pred: float, R_true: float, beta_u: float) -> float:
    """Quality parameter realized when staffing continuously for R_pred but facing R_true."""
    return beta_u * math.sqrt(R_pred / R_true) + delta_beta(R_pred, R_true)


def beta_staffed(R_pred: float, R_true: float, beta_u: float) -> float:
    """(N - R_true) / sqrt(R_true) with N the integer staffing for R_pred."""
    return (sqrt_staff(R_pred, beta_u) - R_true) / math.sqrt(R_true)


def delta_N(R_pred: float, R_true: float, beta: float = 0.0) -> tuple[float, int]:
    """(approximate, exact) staffing difference caused by forecasting R_pred for R_true."""
    if R_pred <= 0 or R_true <= 0:
        raise NonPositiveInput("offered loads must be positive")
    return R_pred - R_true, sqrt_staff(R_pred, beta) - sqrt_staff(R_true, beta)


def normal_hazard(x):
    """phi(x) / (1 - Phi(x)), computed on the log scale."""
    return np.exp(stats.norm.logpdf(x) - special.log_ndtr(-np.asarray(x, dtype=float)))


def garnett_delay(beta: float, mu_over_theta: float) -> float:
    """QED-limit P(W > 0) for the Erlang-A queue."""
    if mu_over_theta <= 0:
        raise NonPositiveInput("mu/theta must be positive")
    r = math.sqrt(mu_over_theta)
    return float(1.0 / (1.0 + normal_hazard(beta * r) / (r * normal_hazard(-beta))))


@dataclass(frozen=True)
class ErlangAPerformance:
    p_wait: float
    p_ab: float
    e_wait: float  # minutes, averaged over all arrivals
    n_states: int


@functools.lru_cache(maxsize=65536)
def _erlang_a(lam: float, mu: float, theta: float, N: int, cap: int, tail: float) -> ErlangAPerformance:
    J = max(2 * N, int(N + 4 * lam / theta + 10 * math.sqrt(lam / theta + 1) + 50))
    while True:
        if J > cap:
            raise TruncationOverflow(f"state space would exceed {cap} states")
        j = np.arange(1, J + 1, dtype=float)
        death = np.minimum(j, N) * mu + np.maximum(j - N, 0.0) * theta
        logw = np.concatenate([[0.0], np.cumsum(math.log(lam) - np.log(death))])
        logw -= logw.max()
        w = np.exp(logw)
        total = w.sum()
        last_ratio = lam / death[-1]
        # the remaining ratios only shrink, so a geometric series bounds the tail
        if last_ratio < 1 and w[-1] * last_ratio / (1 - last_ratio) < tail * total:
            break
        J *= 2
    pi = w / total
    beyond = np.concatenate([np.cumsum(pi[::-1])[::-1][1:], [0.0]])
    cut = int(np.argmax(beyond < tail))
    pi = pi[: cut + 1]
    pi = pi / pi.sum()
    states = np.arange(len(pi))
    p_wait = float(pi[N:].sum()) if N < len(pi) else 0.0
    eq = float(np.sum(np.maximum(states - N, 0) * pi))
    return ErlangAPerformance(p_wait, min(theta * eq / lam, 1.0), eq / lam, len(pi))


def erlang_a_exact(lam: float, mu: float, theta: float, N: int, cap: int = 10**6, tail: float = 1e-12) -> ErlangAPerformance:
    """Steady state of M/M/N+M as a birth-death chain.

    Birth rate lam, death rate min(j, N) mu + max(j - N, 0) theta. P_wait
    uses PASTA; P_ab = theta E[Q] / lam and E[W] = E[Q] / lam (Little).
    """
    if min(lam, mu, theta) <= 0:
        raise NonPositiveInput("rates must be positive")
    if int(N) != N or N < 1:
        raise NonPositiveInput("N must be a positive integer")
    return _erlang_a(float(lam), float(mu), float(theta), int(N), int(cap), float(tail))


# ---------------------------------------------------------------------------
# forecast-error impact report


@dataclass
class StaffingReport:
    rows: pd.DataFrame
    excluded: int

    def aggregate(self) -> pd.DataFrame:
        """Per-period means over days for each (beta_u, mu/theta); ratios are ratios of the means."""
        keys = ["beta_u", "mu_over_theta", "period"]
        cols = [c for c in self.rows.columns if c.startswith(("user_", "adj_"))] + [
            "R_true", "R_pred", "beta_a", "beta_a_staffed", "delta_beta", "delta_N", "delta_N_exact"
        ]
        g = self.rows.groupby(keys, sort=True)[cols].mean().reset_index()
        for m in ("p_wait_asym", "p_wait", "p_ab", "e_wait_sec"):
            with np.errstate(divide="ignore", invalid="ignore"):
                g[f"ratio_{m}"] = np.where(g[f"user_{m}"] > 0, g[f"adj_{m}"] / g[f"user_{m}"], np.nan)
            g.loc[(g[f"user_{m}"] == g[f"adj_{m}"]), f"ratio_{m}"] = 1.0
        return g

    def to_csv(self, path) -> None:
        out = self.rows.copy()
        out["date"] = [d.isoformat() for d in out["date"]]
        out.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")

    def to_json(self) -> str:
        agg = self.aggregate()
        series = []
        for (b, r), grp in agg.groupby(["beta_u", "mu_over_theta"], sort=True):
            series.append(
                {
                    "beta_u": float(b),
                    "mu_over_theta": float(r),
                    **{c: [float(v) for v in grp[c]] for c in grp.columns if c not in ("beta_u", "mu_over_theta")},
                }
            )
        return json.dumps({"excluded_cells": self.excluded, "series": series}, indent=2, sort_keys=True)


def _service_grid(s, days, K, name):
    if isinstance(s, ServiceSeries):
        lookup = {d.date: i for i, d in enumerate(s.days)}
        try:
            return np.array([s.mean_service_time[lookup[d.date]] for d in days])
        except KeyError as exc:
            raise AlignmentError(f"{name} service times missing day {exc.args[0]}") from exc
    grid = np.broadcast_to(np.asarray(s, dtype=float), (len(days), K))
    return np.array(grid)


def performance_ratio_report(
    forecasts: ForecastSet,
    actuals: PeriodSeries,
    pred_service,
    true_service,
    beta_u_grid: Sequence[float] = (-1.0, 0.0, 1.0),
    ratio_grid: Sequence[float] = (0.1, 1.0, 2.0),
) -> StaffingReport:
    """Compare the service the manager expects with what the realized load delivers.

    For every forecast cell and scenario (beta_u, mu/theta): staff N for the
    predicted load; the user side evaluates that N against the predicted
    load, the adjusted side against the realized load. Service inputs are
    ServiceSeries, scalars or grids aligned with ``actuals``. Cells with a
    zero forecast or zero realized count are excluded and counted.
    """
    dates, pred = forecasts.day_grid("point")
    lookup = {d.date: i for i, d in enumerate(actuals.days)}
    missing = [d for d in dates if d not in lookup]
    if missing:
        raise AlignmentError(f"no actual counts for {missing[:3]}")
    if pred.shape[1] != actuals.K:
        raise AlignmentError(f"forecast has {pred.shape[1]} periods, actuals have {actuals.K}")
    days = [actuals.days[lookup[d]] for d in dates]
    truth = actuals.counts[[lookup[d] for d in dates]].astype(float)
    S_pred = _service_grid(pred_service, days, actuals.K, "predicted")
    S_true = _service_grid(true_service, days, actuals.K, "actual")
    P = float(actuals.period_minutes)
    rows, excluded = [], 0
    for i, day in enumerate(days):
        for k in range(actuals.K):
            if pred[i, k] <= 0 or truth[i, k] <= 0:
                excluded += 1
                continue
            Rp = offered_load(pred[i, k], S_pred[i, k], P)
            Rt = offered_load(truth[i, k], S_true[i, k], P)
            mu_p, mu_t = 1.0 / S_pred[i, k], 1.0 / S_true[i, k]
            for b in beta_u_grid:
                N = sqrt_staff(Rp, b)
                ba = beta_adjusted(Rp, Rt, b)
                dn, dn_exact = delta_N(Rp, Rt, b)
                for ratio in ratio_grid:
                    user = erlang_a_exact(Rp * mu_p, mu_p, mu_p / ratio, N)
                    adj = erlang_a_exact(Rt * mu_t, mu_t, mu_t / ratio, N)
                    rows.append(
                        {
                            "date": day.date,
                            "period": k + 1,
                            "beta_u": float(b),
                            "mu_over_theta": float(ratio),
                            "R_true": Rt,
                            "R_pred": Rp,
                            "N_staffed": N,
                            "beta_a": ba,
                            "beta_a_staffed": (N - Rt) / math.sqrt(Rt),
                            "delta_beta": delta_beta(Rp, Rt),
                            "delta_N": dn,
                            "delta_N_exact": dn_exact,
                            "user_p_wait_asym": garnett_delay(b, ratio),
                            "user_p_wait": user.p_wait,
                            "user_p_ab": user.p_ab,
                            "user_e_wait_sec": 60.0 * user.e_wait,
                            "adj_p_wait_asym": garnett_delay(ba, ratio),
                            "adj_p_wait": adj.p_wait,
                            "adj_p_ab": adj.p_ab,
                            "adj_e_wait_sec": 60.0 * adj.e_wait,
                        }
                    )
    return StaffingReport(pd.DataFrame(rows), excluded)
