"""Poisson log-linear screening of calendar indicators on daily totals.

The daily total is modeled as Poisson with log-mean linear in weekday
indicators plus delivery/billing flags. Nested likelihood-ratio contrasts
decide which flags carry signal; the result is advisory and feeds the
fixed-effect specification of the forecaster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from .dataio import BILLING_COLUMNS, DELIVERY_COLUMNS, WEEKDAY_NAMES, CalendarDay, PeriodSeries
from .designspace import alias_columns


class Separation(ValueError):
    """A column is nonzero only on zero-count rows, so its MLE is -inf."""


class NonConvergence(RuntimeError):
    pass


class NotNested(ValueError):
    pass


@dataclass
class GlmFit:
    names: list[str]
    coefficients: np.ndarray
    cov: np.ndarray
    deviance: float
    fitted: np.ndarray
    X: np.ndarray
    y: np.ndarray
    n_iter: int
    dropped: list[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def chi_square(self) -> np.ndarray:
        return (self.coefficients / self.se) ** 2

    @property
    def p_values(self) -> np.ndarray:
        return stats.chi2.sf(self.chi_square, 1)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def table(self) -> list[dict]:
        return [
            {"parameter": n, "estimate": float(b), "std_error": float(s), "chi_square": float(c), "p_value": float(p)}
            for n, b, s, c, p in zip(self.names, self.coefficients, self.se, self.chi_square, self.p_values)
        ]


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def fit_poisson_loglinear(
    daily_totals,
    design: np.ndarray,
    names: Sequence[str] | None = None,
    maxiter: int = 100,
    tol: float = 1e-12,
) -> GlmFit:
    """Poisson MLE with log link by iteratively reweighted least squares.

    Aliased columns are dropped (the later of any dependent set). The start
    puts log(mean + 0.5) on the intercept-like direction and halves the step
    whenever the deviance goes up.
    """
    y = np.asarray(daily_totals, dtype=float)
    X = np.atleast_2d(np.asarray(design, dtype=float))
    if X.shape[0] != len(y):
        raise ValueError(f"design has {X.shape[0]} rows for {len(y)} totals")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("totals must be finite and non-negative")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    kept, dropped = alias_columns(X)
    X = X[:, kept]
    kept_names = [names[j] for j in kept]

    for j, nm in enumerate(kept_names):
        col = X[:, j]
        nz = col != 0
        # a non-negative column supported only on zero counts drives its
        # coefficient to -inf
        if np.all(col >= 0) and nz.any() and np.all(y[nz] == 0):
            raise Separation(f"column {nm!r} is nonzero only where the count is zero")

    # intercept start: project a constant log(mean + 0.5) onto the column space
    eta0 = np.full(len(y), np.log(y.mean() + 0.5))
    beta, *_ = np.linalg.lstsq(X, eta0, rcond=None)
    mu = np.exp(X @ beta)
    dev = poisson_deviance(y, mu)
    for it in range(1, maxiter + 1):
        z = X @ beta + (y - mu) / mu
        sw = np.sqrt(mu)
        step, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        step = step - beta
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta = X @ cand
            if np.all(eta < 700):
                mu_c = np.exp(eta)
                dev_c = poisson_deviance(y, mu_c)
                if dev_c <= dev * (1 + 1e-12) + 1e-12:
                    break
            t *= 0.5
        else:
            raise NonConvergence("step halving failed to reduce the deviance")
        beta, mu = cand, mu_c
        done = abs(dev - dev_c) <= tol * (abs(dev_c) + 1.0)
        dev = dev_c
        if done:
            break
    else:
        raise NonConvergence(f"IRLS did not converge in {maxiter} iterations")
    if np.any(X @ beta < -30):
        raise Separation("fitted means collapse to zero; design separates the zero counts")
    info = X.T @ (mu[:, None] * X)
    cov = linalg.inv(info)
    return GlmFit(kept_names, beta, cov, max(dev, 0.0), mu, X, y, it, [names[j] for j in dropped])


class Contrast(NamedTuple):
    statistic: float
    df: int
    p_value: float


def _in_span(A: np.ndarray, B: np.ndarray, tol: float = 1e-8) -> bool:
    """True if every column of B lies in the column space of A."""
    if B.shape[1] == 0:
        return True
    coef, *_ = np.linalg.lstsq(A, B, rcond=None)
    resid = B - A @ coef
    return bool(np.all(np.linalg.norm(resid, axis=0) <= tol * np.maximum(np.linalg.norm(B, axis=0), 1.0)))


def lr_contrast(full: GlmFit, reduced: GlmFit, n_obs: int | None = None) -> Contrast:
    """Likelihood-ratio statistic deviance(reduced) - deviance(full) with its chi-square p-value."""
    if full.X.shape[0] != reduced.X.shape[0] or not np.array_equal(full.y, reduced.y):
        raise NotNested("models were fit to different data")
    if n_obs is not None and n_obs != full.n_obs:
        raise ValueError(f"n_obs {n_obs} does not match the fitted data ({full.n_obs})")
    if not _in_span(full.X, reduced.X):
        raise NotNested("reduced design is not contained in the full design's span")
    df = full.X.shape[1] - reduced.X.shape[1]
    stat = max(reduced.deviance - full.deviance, 0.0)
    p = 1.0 if df == 0 else float(stats.chi2.sf(stat, df))
    return Contrast(float(stat), int(df), p)


def f_scaled(contrast: Contrast, full: GlmFit) -> tuple[float, int, int, float]:
    """F version of a contrast: (statistic/df1, df1, n_obs - full columns, p)."""
    df1 = contrast.df
    df2 = full.n_obs - full.X.shape[1]
    if df1 == 0 or df2 <= 0:
        return 0.0, df1, df2, 1.0
    F = contrast.statistic / df1
    return float(F), df1, int(df2), float(stats.f.sf(F, df1, df2))


# ---------------------------------------------------------------------------
# the screening ladder


def screening_design(days: Sequence[CalendarDay], columns: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Weekday indicators W_1..W_6 (no intercept) followed by the named flags."""
    wd = np.array([d.weekday_index for d in days])
    cols = [(wd == j).astype(float) for j in range(1, 7)]
    names = [f"W[{n}]" for n in WEEKDAY_NAMES]
    for c in columns:
        cols.append(np.array([float(d.flag(c)) for d in days]))
        names.append(c)
    return np.column_stack(cols), names


@dataclass
class ContrastRow:
    label: str
    dropped: list[str]
    statistic: float
    df: int
    p_value: float
    f_statistic: float
    f_df2: int
    f_p_value: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ScreeningReport:
    full: GlmFit
    contrasts: list[ContrastRow]
    droppable: dict[str, bool]
    alpha: float = 0.05

    def to_dict(self) -> dict:
        return {
            "n_days": self.full.n_obs,
            "deviance": self.full.deviance,
            "dropped_aliased": self.full.dropped,
            "parameters": self.full.table(),
            "contrasts": [c.to_dict() for c in self.contrasts],
            "droppable": self.droppable,
            "alpha": self.alpha,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'Parameter':<20}{'Estimate':>12}{'Chi-Square':>14}{'Pr > ChiSq':>12}"]
        for r in self.full.table():
            lines.append(f"{r['parameter']:<20}{r['estimate']:>12.4f}{r['chi_square']:>14.2f}{r['p_value']:>12.4f}")
        lines.append("")
        lines.append(f"{'Contrast':<32}{'DF':>4}{'Chi-Square':>12}{'Pr > ChiSq':>12}{'F':>10}{'Pr > F':>10}")
        for c in self.contrasts:
            lines.append(
                f"{c.label:<32}{c.df:>4}{c.statistic:>12.3f}{c.p_value:>12.4f}{c.f_statistic:>10.3f}{c.f_p_value:>10.4f}"
            )
        lines.append("")
        flagged = [k for k, v in self.droppable.items() if v]
        lines.append("droppable (p > %.2f): %s" % (self.alpha, ", ".join(flagged) if flagged else "none"))
        return "\n".join(lines) + "\n"


def _fit_columns(days, y, columns):
    X, names = screening_design(days, columns)
    return fit_poisson_loglinear(y, X, names)


def _row(label, full, reduced, dropped):
    c = lr_contrast(full, reduced)
    F, df1, df2, fp = f_scaled(c, full)
    return ContrastRow(label, list(dropped), c.statistic, c.df, c.p_value, F, df2, fp)


def screen_calendar_effects(
    days: Sequence[CalendarDay],
    daily_totals,
    alpha: float = 0.05,
) -> ScreeningReport:
    """Run the contrast ladder on daily totals.

    1. all four delivery and all four billing flags vs. dropping billing 1, 7, 21;
    2. four delivery flags vs. a single global delivery flag (billing 14 kept);
    3. the full model vs. global delivery plus billing 14;
    4. one drop-one contrast per flag; a flag with p > ``alpha`` is droppable.
    """
    days = list(days)
    y = np.asarray(daily_totals, dtype=float)
    full_cols = list(DELIVERY_COLUMNS + BILLING_COLUMNS)
    full = _fit_columns(days, y, full_cols)
    rows = []
    redundant = ["billing_1", "billing_7", "billing_21"]
    step1_cols = [c for c in full_cols if c not in redundant]
    step1 = _fit_columns(days, y, step1_cols)
    rows.append(_row("drop billing 1, 7, 21", full, step1, redundant))
    compact = _fit_columns(days, y, ["global_delivery", "billing_14"])
    try:
        rows.append(_row("four delivery vs global", step1, compact, list(DELIVERY_COLUMNS)))
    except NotNested:
        # overlapping delivery windows: the global flag is not a sum of the four
        pass
    try:
        rows.append(_row("full vs global + billing 14", full, compact, redundant + list(DELIVERY_COLUMNS)))
    except NotNested:
        pass
    droppable = {}
    for c in full_cols:
        if c in full.dropped:
            droppable[c] = True
            continue
        reduced = _fit_columns(days, y, [x for x in full_cols if x != c])
        row = _row(f"drop {c}", full, reduced, [c])
        rows.append(row)
        droppable[c] = bool(row.p_value > alpha)
    return ScreeningReport(full, rows, droppable, alpha)


def screen_series(series: PeriodSeries, alpha: float = 0.05, include_outliers: bool = False) -> ScreeningReport:
    """Screen a period series by its regular days' totals."""
    s = series if include_outliers else series.regular()
    return screen_calendar_effects(s.days, s.counts.sum(axis=1), alpha)
