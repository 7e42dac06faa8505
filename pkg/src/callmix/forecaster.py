"""Forecasting pipelines: two-stage mixed model, regression benchmarks, the
same-weekday averaging model, and period-level service-time regressions."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .dataio import WEEKDAY_NAMES, CalendarDay, PeriodSeries, ServiceSeries, gap_matrix
from .designspace import (
    CovarianceSpec,
    FixedEffectsSpec,
    alias_columns,
    ar1_kernel,
    arma11_kernel,
    build_designs,
    daily_noise_variance,
    day_level_design,
    unit_gaps,
)
from .gausslik import (
    DayBlockCovariance,
    DenseCovariance,
    FittedMixedModel,
    ForecastSet,
    FutureBlock,
    fit_gls,
    gls,
    log_likelihood,
    predict_blup,
    root_transform,
)

PIPELINES = ("mixed", "benchmark1", "benchmark2", "industry")

# a floor for variances pinned at the edge of the parameter space
_VAR_FLOOR = 1e-12


class InsufficientHistory(ValueError):
    pass


class NoComparableDays(ValueError):
    pass


class RankDeficient(ValueError):
    pass


class NotNested(ValueError):
    pass


class UnseenWeekday(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    fx: FixedEffectsSpec = field(default_factory=FixedEffectsSpec)
    cov: CovarianceSpec = field(default_factory=CovarianceSpec)
    pipeline: str = "mixed"
    learn_window_days: int = 42
    lead_time_days: int = 7
    horizon_days: int = 1
    level: float = 0.95
    name: str = ""

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.learn_window_days < 14:
            raise ValueError("learn_window_days must be at least 14")
        if self.lead_time_days < 1:
            raise ValueError("lead_time_days must be at least 1")
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be at least 1")

    @property
    def label(self) -> str:
        return self.name or self.pipeline

    def learning_window(self, origin: dt.date) -> tuple[dt.date, dt.date]:
        """Calendar bounds (inclusive) of the learning data for a forecast origin."""
        last = origin - dt.timedelta(days=self.lead_time_days)
        first = last - dt.timedelta(days=self.learn_window_days - 1)
        return first, last


# ---------------------------------------------------------------------------
# two-stage mixed model


def _stage1_start(m: np.ndarray, X: np.ndarray) -> dict[str, float]:
    beta, *_ = np.linalg.lstsq(X, m, rcond=None)
    r = m - X @ beta
    s2 = max(float(r @ r) / max(len(m) - X.shape[1], 1), 1e-4)
    return {"sigma_G2": 0.8 * s2, "rho_G": 0.3, "u": 0.2 * s2}


def fit_stage1(
    daily_means: np.ndarray,
    days: Sequence[CalendarDay],
    fx: FixedEffectsSpec,
    u_fixed: float | None = None,
) -> tuple[np.ndarray, float, FittedMixedModel]:
    """Fit the day-average model; returns (G_hat over ``days``, u_hat, fit).

    With ``u_fixed`` the daily noise variance is held at that value.

    Averaging the intra-day profile columns over a day leaves only weekday
    (group) indicators, already spanned by the weekday levels, so the
    day-level design is [W, F_D] after aliasing.
    """
    m = np.asarray(daily_means, dtype=float)
    if len({d.weekday_index for d in days}) < 3:
        raise InsufficientHistory("stage 1 needs at least three distinct weekdays")
    mat, names = day_level_design(days, FixedEffectsSpec(fx.pattern_mode, fx.exogenous_columns, True))
    kept, _ = alias_columns(mat)
    X = mat[:, kept]
    gaps = gap_matrix(days)
    eye = np.eye(len(days))

    def V(th):
        return DenseCovariance(ar1_kernel(th["sigma_G2"], th["rho_G"], gaps) + th["u"] * eye)

    theta0 = _stage1_start(m, X)
    fixed = None
    if u_fixed is not None:
        fixed = {"u": max(float(u_fixed), _VAR_FLOOR)}
        theta0["u"] = fixed["u"]
    fit = fit_gls(
        m,
        X,
        V,
        theta0,
        kinds={"sigma_G2": "var", "rho_G": "corr", "u": "var"},
        fixed=fixed,
        beta_names=[names[i] for i in kept],
    )
    G = ar1_kernel(fit.theta["sigma_G2"], fit.theta["rho_G"], gaps)
    return G, fit.theta["u"], fit


def within_day_covariance(theta: dict[str, float], K: int, intra: str) -> np.ndarray:
    """R + sigma2 * I for the given intra-day structure."""
    if intra == "ar1":
        R = ar1_kernel(theta["sigma_R2"], theta["rho_R"], unit_gaps(K))
    elif intra == "arma11":
        R = arma11_kernel(theta["sigma_R2"], theta["delta"], theta["rho_R"], K, check=False)
    else:
        R = theta["sigma_R2"] * np.eye(K)
    return R + theta["sigma2"] * np.eye(K)


def _stage2_start(Y: np.ndarray, X: np.ndarray, sigma2: float) -> dict[str, float]:
    y = Y.ravel()
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    E = (y - X @ beta).reshape(Y.shape)
    W = E - E.mean(axis=1, keepdims=True)
    within = float(W.var()) * Y.shape[1] / max(Y.shape[1] - 1, 1)
    rho = 0.3
    if Y.shape[1] > 2:
        a, b = W[:, :-1].ravel(), W[:, 1:].ravel()
        den = np.sqrt((a @ a) * (b @ b))
        if den > 0:
            rho = float(np.clip((a @ b) / den, -0.5, 0.9))
    rho = max(rho, 0.1)
    return {"sigma_R2": max(within - sigma2, 0.1 * within, 1e-3), "rho_R": rho}


def fit_stage2(
    Y: np.ndarray,
    designs,
    G_fixed: np.ndarray,
    cov: CovarianceSpec,
) -> FittedMixedModel:
    """REML for the within-day parameters with the day covariance frozen.

    ``Y`` is the D x K grid of transformed counts and ``designs`` the
    matching DesignBundle.
    """
    Y = np.asarray(Y, dtype=float)
    D, K = Y.shape
    X = designs.X()
    y = Y.ravel()
    G_fixed = np.asarray(G_fixed, dtype=float)
    fixed: dict[str, float] = {}
    if cov.sigma2_mode == "fixed":
        fixed["sigma2"] = cov.sigma2_value

    if cov.intra_structure == "indep" and cov.sigma2_mode == "fixed" and not np.any(G_fixed):
        # ordinary regression: the REML optimum is closed form
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ beta
        s2 = float(r @ r) / (len(y) - X.shape[1])
        theta = {"sigma_R2": max(s2 - cov.sigma2_value, _VAR_FLOOR), **fixed}
        Vop = DayBlockCovariance(G_fixed, within_day_covariance(theta, K, "indep"))
        sol = gls(y, X, Vop)
        return FittedMixedModel(
            beta=sol.beta,
            beta_names=list(designs.kept),
            theta=theta,
            loglik=log_likelihood(y, X, Vop, "reml"),
            converged=True,
            n_iter=0,
            cov_beta=sol.cov_beta,
        )

    start = _stage2_start(Y, X, cov.sigma2_value)
    kinds = {"sigma_R2": "var"}
    theta0 = {"sigma_R2": start["sigma_R2"]}
    if cov.intra_structure in ("ar1", "arma11"):
        kinds["rho_R"] = "corr"
        theta0["rho_R"] = start["rho_R"]
    if cov.intra_structure == "arma11":
        kinds["delta"] = "corr"
        theta0["delta"] = start["rho_R"]
    if cov.sigma2_mode == "estimate":
        kinds["sigma2"] = "var"
        theta0["sigma2"] = cov.sigma2_value
    theta0.update(fixed)

    def V(th):
        return DayBlockCovariance(G_fixed, within_day_covariance(th, K, cov.intra_structure))

    return fit_gls(y, X, V, theta0, kinds, fixed=fixed, beta_names=designs.kept)


@dataclass
class MixedFit:
    """Both stages of a two-stage fit plus what prediction needs."""

    days: tuple[CalendarDay, ...]
    K: int
    fx: FixedEffectsSpec
    cov: CovarianceSpec
    stage1: FittedMixedModel | None
    stage2: FittedMixedModel
    Y: np.ndarray
    kept: list[str]

    @property
    def theta(self) -> dict[str, float]:
        th = dict(self.stage2.theta)
        if self.stage1 is not None:
            th.update({k: self.stage1.theta[k] for k in ("sigma_G2", "rho_G", "u")})
        else:
            th.update({"sigma_G2": 0.0, "rho_G": 0.0})
        return th

    def day_cov(self, a: Sequence[CalendarDay], b: Sequence[CalendarDay]) -> np.ndarray:
        if self.stage1 is None:
            return np.zeros((len(a), len(b)))
        th = self.stage1.theta
        return th["sigma_G2"] * np.power(th["rho_G"], gap_matrix(a, b))

    def to_dict(self) -> dict:
        return {
            "days": [d.date.isoformat() for d in self.days],
            "K": self.K,
            "fixed_effects": {"pattern_mode": self.fx.pattern_mode, "exogenous": list(self.fx.exogenous_columns)},
            "covariance": {
                "intra": self.cov.intra_structure,
                "inter": self.cov.inter_structure,
                "sigma2_mode": self.cov.sigma2_mode,
            },
            "theta": {k: float(v) for k, v in self.theta.items()},
            "stage1": None if self.stage1 is None else self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
        }


def fit_two_stage(train: PeriodSeries, fx: FixedEffectsSpec, cov: CovarianceSpec) -> MixedFit:
    Y = root_transform(train.counts)
    designs = build_designs(train, fx)
    if cov.inter_structure == "ar1":
        G, _, s1 = fit_stage1(Y.mean(axis=1), train.days, fx)
    else:
        G, s1 = np.zeros((train.D, train.D)), None
    s2 = fit_stage2(Y, designs, G, cov)
    if s1 is not None and cov.u_refine:
        R = within_day_covariance({**s2.theta, "sigma2": 0.0}, train.K, cov.intra_structure)
        u = daily_noise_variance(R, s2.theta["sigma2"])
        G, _, s1 = fit_stage1(Y.mean(axis=1), train.days, fx, u_fixed=u)
        s2 = fit_stage2(Y, designs, G, cov)
    return MixedFit(train.days, train.K, fx, cov, s1, s2, Y, list(designs.kept))


def predict_mixed(fit: MixedFit, targets: Sequence[CalendarDay], level: float = 0.95) -> ForecastSet:
    K = fit.K
    th = fit.theta
    X = build_designs(fit.days, fit.fx, K).X(fit.kept)
    fut = build_designs(list(targets), fit.fx, K).X(fit.kept)
    Rstar = within_day_covariance(th, K, fit.cov.intra_structure)
    V = DayBlockCovariance(fit.day_cov(fit.days, fit.days), Rstar)
    cross = np.kron(fit.day_cov(targets, fit.days), np.ones((K, K)))
    var = np.tile(np.diag(Rstar), len(targets)) + np.repeat(np.diag(fit.day_cov(targets, targets)), K)
    block = FutureBlock(
        X=fut,
        cross=cross,
        var=var,
        dates=[d.date for d in targets for _ in range(K)],
        periods=list(range(1, K + 1)) * len(targets),
    )
    return predict_blup(fit.stage2, fit.Y.ravel(), X, V, block, level)


# ---------------------------------------------------------------------------
# benchmarks and the averaging model


def forecast_industry(history: PeriodSeries, target: dt.date | CalendarDay, period: int | None = None):
    """Mean count over history days sharing the target's weekday.

    Returns the K-vector of per-period means, or one value if ``period``
    (1-based) is given.
    """
    tdate = target.date if isinstance(target, CalendarDay) else target
    wd = CalendarDay(tdate).weekday_index
    rows = [i for i, d in enumerate(history.days) if d.weekday_index == wd and d.date < tdate]
    if not rows:
        raise NoComparableDays(f"no {WEEKDAY_NAMES[wd - 1]} before {tdate.isoformat()} in history")
    means = history.counts[rows].mean(axis=0).astype(float)
    return means if period is None else float(means[period - 1])


BENCHMARK1_FX = FixedEffectsSpec("multi", (), include_weekday_levels=False)


def fit_benchmark(which: int, window: PeriodSeries, fx: FixedEffectsSpec, sigma2: float = 0.25):
    """OLS on the transformed scale with i.i.d. variance sigma_R^2 + sigma2."""
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    if window.D == 0:
        raise InsufficientHistory("empty learning window")
    use_fx = BENCHMARK1_FX if which == 1 else fx
    designs = build_designs(window, use_fx)
    X = designs.X()
    Y = root_transform(window.counts)
    y = Y.ravel()
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    dof = len(y) - X.shape[1]
    if dof <= 0:
        raise InsufficientHistory("not enough cells to estimate the residual variance")
    sigma_R2 = max(float(r @ r) / dof - sigma2, _VAR_FLOOR)
    stage2 = FittedMixedModel(
        beta=beta,
        beta_names=list(designs.kept),
        theta={"sigma_R2": sigma_R2, "sigma2": sigma2},
        loglik=float("nan"),
        converged=True,
        n_iter=0,
    )
    cov = CovarianceSpec("indep", "none", "fixed", sigma2)
    return MixedFit(window.days, window.K, use_fx, cov, None, stage2, Y, list(designs.kept))


def forecast_benchmark(which: int, window: PeriodSeries, fx: FixedEffectsSpec, targets, level: float = 0.95) -> ForecastSet:
    return predict_mixed(fit_benchmark(which, window, fx), targets, level)


def fitted_cell_values(fit: MixedFit) -> np.ndarray:
    """In-sample fitted values X beta on the transformed scale, D x K."""
    X = build_designs(fit.days, fit.fx, fit.K).X(fit.kept)
    sol = gls(fit.Y.ravel(), X, DayBlockCovariance(fit.day_cov(fit.days, fit.days),
                                                   within_day_covariance(fit.theta, fit.K, fit.cov.intra_structure)))
    return (X @ sol.beta).reshape(len(fit.days), fit.K)


# ---------------------------------------------------------------------------
# orchestration


def learning_data(spec: ModelSpec, data: PeriodSeries, origin: dt.date) -> PeriodSeries:
    first, last = spec.learning_window(origin)
    train = data.between(first, last).regular()
    if train.D < 7:
        raise InsufficientHistory(
            f"only {train.D} regular days in learning window {first.isoformat()}..{last.isoformat()}"
        )
    return train


def forecast_targets(spec: ModelSpec, data: PeriodSeries, origin: dt.date) -> list[CalendarDay]:
    end = origin + dt.timedelta(days=spec.horizon_days - 1)
    return [d for d in data.days if origin <= d.date <= end]


def fit_for_origin(spec: ModelSpec, data: PeriodSeries, origin: dt.date) -> MixedFit:
    train = learning_data(spec, data, origin)
    if spec.pipeline == "mixed":
        return fit_two_stage(train, spec.fx, spec.cov)
    if spec.pipeline in ("benchmark1", "benchmark2"):
        return fit_benchmark(int(spec.pipeline[-1]), train, spec.fx, spec.cov.sigma2_value)
    raise ValueError("the averaging model has no fitted parameters")


def run_pipeline(
    spec: ModelSpec,
    data: PeriodSeries,
    origin: dt.date,
    targets: Sequence[CalendarDay] | None = None,
) -> ForecastSet:
    """Forecast the horizon starting at ``origin`` from the learning window ``spec`` implies."""
    targets = list(targets) if targets is not None else forecast_targets(spec, data, origin)
    if not targets:
        raise InsufficientHistory(f"no forecast days at origin {origin.isoformat()}")
    train = learning_data(spec, data, origin)
    seen = {d.weekday_index for d in train.days}
    missing = sorted({d.weekday_index for d in targets} - seen)
    if missing:
        raise InsufficientHistory(f"weekdays {missing} absent from the learning window")
    if spec.pipeline == "industry":
        rows = []
        for t in targets:
            pts = forecast_industry(train, t)
            for k, p in enumerate(pts, start=1):
                rows.append({"date": t.date, "period": k, "point": p, "lower": np.nan, "upper": np.nan,
                             "point_transformed": float(root_transform(p)), "sd_transformed": np.nan})
        return ForecastSet(pd.DataFrame(rows))
    fit = fit_for_origin(spec, data, origin)
    return predict_mixed(fit, targets, spec.level)


# ---------------------------------------------------------------------------
# service-time regressions

SERVICE_ORDER = {3: 0, 1: 1, 2: 2}  # nesting chain 3 < 1 < 2
_SIX_DAY_WEEK = "1111101"  # numpy weekmask, Monday first; Saturday closed


@dataclass
class ServiceModelFit:
    model_id: int
    coefficients: dict[str, float]
    error_ss: float
    n_params: int
    rank: int
    n_obs: int
    K: int
    weekdays: tuple[int, ...]
    trend_origin: dt.date
    floor: float = 0.1
    weighted: bool = False

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "coefficients": {k: float(v) for k, v in self.coefficients.items()},
            "error_ss": float(self.error_ss),
            "n_params": self.n_params,
            "rank": self.rank,
            "n_obs": self.n_obs,
            "K": self.K,
            "weekdays": list(self.weekdays),
            "trend_origin": self.trend_origin.isoformat(),
            "floor": self.floor,
            "weighted": self.weighted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceModelFit":
        d = dict(d)
        d["trend_origin"] = dt.date.fromisoformat(d["trend_origin"])
        d["weekdays"] = tuple(d["weekdays"])
        return cls(**d)


def trend_index(dates: Sequence[dt.date], origin: dt.date) -> np.ndarray:
    """1-based ordinal of each date on the six-day working calendar counted from ``origin``."""
    return np.array(
        [np.busday_count(origin, d, weekmask=_SIX_DAY_WEEK) for d in dates], dtype=float
    ) + 1.0


def service_design(model_id: int, days: Sequence[CalendarDay], K: int, origin: dt.date) -> tuple[np.ndarray, list[str]]:
    wd = np.repeat([d.weekday_index for d in days], K)
    k = np.tile(np.arange(1, K + 1, dtype=float), len(days))
    trend = np.repeat(trend_index([d.date for d in days], origin), K)
    cols, names = [], []
    short = [n[:3] for n in WEEKDAY_NAMES]
    if model_id in (1, 3):
        for q in range(1, 7):
            cols.append((wd == q).astype(float))
            names.append(f"alpha[{short[q - 1]}]")
        cols += [k**2, k]
        names += ["beta1", "beta2"]
        if model_id == 1:
            for q in range(1, 7):
                cols.append((wd == q) * k**2)
                names.append(f"gamma1[{short[q - 1]}]")
        for q in range(1, 7):
            cols.append((wd == q) * k)
            names.append(f"gamma2[{short[q - 1]}]")
    elif model_id == 2:
        for q in range(1, 7):
            for kk in range(1, K + 1):
                cols.append(((wd == q) & (k == kk)).astype(float))
                names.append(f"rho[{short[q - 1]},{kk}]")
    else:
        raise ValueError(f"model_id must be 1, 2 or 3, got {model_id}")
    cols.append(trend)
    names.append("phi")
    return np.column_stack(cols), names


def fit_service_model(model_id: int, s: ServiceSeries, weighted: bool = False, floor: float = 0.1) -> ServiceModelFit:
    """Ordinary least squares for service-time Model 1, 2 or 3.

    ``n_params`` follows the model-degrees-of-freedom convention: the rank
    of the design less one for the overall level.
    """
    weekdays = tuple(sorted({d.weekday_index for d in s.days}))
    if len(weekdays) < 2:
        raise RankDeficient("service series must span at least two weekdays")
    origin = s.days[0].date
    X, names = service_design(model_id, s.days, s.K, origin)
    kept, _ = alias_columns(X)
    X = X[:, kept]
    z = s.mean_service_time.ravel()
    w = np.ones_like(z)
    if weighted:
        if s.n_calls is None:
            raise ValueError("weighted fit needs per-cell call counts")
        w = s.n_calls.ravel().astype(float)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
    r = z - X @ coef
    if X.shape[0] <= X.shape[1]:
        raise RankDeficient("more parameters than observations")
    return ServiceModelFit(
        model_id=model_id,
        coefficients={names[i]: float(c) for i, c in zip(kept, coef)},
        error_ss=float(np.sum(w * r * r)),
        n_params=len(kept) - 1,
        rank=len(kept),
        n_obs=len(z),
        K=s.K,
        weekdays=weekdays,
        trend_origin=origin,
        floor=floor,
        weighted=weighted,
    )


def compare_service_models(a: ServiceModelFit, b: ServiceModelFit) -> tuple[float, int, float]:
    """Error-SS difference of nested fits, referred to a chi-square on the parameter difference."""
    if SERVICE_ORDER[a.model_id] > SERVICE_ORDER[b.model_id] or a.n_obs != b.n_obs or a.n_params > b.n_params:
        raise NotNested(f"model {a.model_id} is not nested in model {b.model_id} on the same data")
    stat = a.error_ss - b.error_ss
    df = b.n_params - a.n_params
    p = float(stats.chi2.sf(stat, df)) if df > 0 else 1.0
    return float(stat), int(df), p


def predict_service(fit: ServiceModelFit, targets: Sequence[CalendarDay]) -> np.ndarray:
    """Plug-in mean service time per (target day, period), floored at ``fit.floor``."""
    targets = list(targets)
    for t in targets:
        if t.weekday_index not in fit.weekdays:
            raise UnseenWeekday(f"{t.date.isoformat()} is a {WEEKDAY_NAMES[t.weekday_index - 1]}, not in training")
    X, names = service_design(fit.model_id, targets, fit.K, fit.trend_origin)
    coef = np.array([fit.coefficients.get(n, 0.0) for n in names])
    pred = (X @ coef).reshape(len(targets), fit.K)
    return np.maximum(pred, fit.floor)


def service_ape(
    s: ServiceSeries,
    model_id: int = 3,
    origins: Sequence[dt.date] | None = None,
    learn_window_days: int = 42,
    lead_time_days: int = 7,
) -> dict[str, float]:
    """Mean absolute percentage error of service predictions.

    "global" fits once on all regular days and scores in sample; "rolling"
    refits a window per origin and scores the origin day out of sample.
    """
    reg = s.regular()
    fit = fit_service_model(model_id, reg)
    pred = predict_service(fit, reg.days)
    out = {"global": float(np.mean(np.abs(pred - reg.mean_service_time) / reg.mean_service_time) * 100)}
    if origins:
        errs = []
        for o in origins:
            last = o - dt.timedelta(days=lead_time_days)
            first = last - dt.timedelta(days=learn_window_days - 1)
            train = reg.between(first, last)
            tgt = [i for i, d in enumerate(reg.days) if d.date == o]
            if not tgt or train.D < 7:
                continue
            try:
                f = fit_service_model(model_id, train)
                p = predict_service(f, [reg.days[tgt[0]]])[0]
            except (RankDeficient, UnseenWeekday):
                continue
            truth = reg.mean_service_time[tgt[0]]
            errs.append(np.mean(np.abs(p - truth) / truth) * 100)
        out["rolling"] = float(np.mean(errs)) if errs else float("nan")
        out["rolling_days"] = len(errs)
    return out
