"""Gaussian linear models with structured covariance.

Restricted (or full) maximum likelihood over covariance parameters, GLS
fixed effects, and conditional-Gaussian (BLUP) prediction of unobserved
cells, with intervals mapped back to the count scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from .designspace import alias_columns

LOG_2PI = math.log(2 * math.pi)


class SingularDesign(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


class BoundaryWarning(UserWarning):
    pass


class CovarianceNotPD(np.linalg.LinAlgError):
    pass


class LevelOutOfRange(ValueError):
    pass


def root_transform(n):
    """sqrt(n + 1/4): Poisson counts to roughly unit-quarter-variance Gaussians."""
    return np.sqrt(np.asarray(n, dtype=float) + 0.25)


def inverse_transform(y):
    """y**2 - 1/4 clamped at zero (values below 1/2, negatives included, map to 0)."""
    y = np.asarray(y, dtype=float)
    return np.where(y > 0.5, y * y - 0.25, 0.0)


# ---------------------------------------------------------------------------
# covariance representations


class DenseCovariance:
    """Cholesky-backed covariance matrix."""

    def __init__(self, V: np.ndarray):
        self.V = np.asarray(V, dtype=float)
        try:
            self._cf = linalg.cho_factor(self.V, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise CovarianceNotPD("covariance matrix is not positive definite") from exc
        if not np.all(np.diag(self._cf[0]) > 0):
            raise CovarianceNotPD("covariance matrix is not positive definite")

    @property
    def n(self) -> int:
        return self.V.shape[0]

    def solve(self, B: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self._cf, B, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._cf[0]))))

    def stack(self, B: np.ndarray) -> np.ndarray:
        return np.asarray(B, dtype=float)

    def gram(self, B: np.ndarray, stacked: np.ndarray | None = None) -> np.ndarray:
        """B' V^-1 B."""
        B = B if stacked is None else stacked
        W = linalg.solve_triangular(self._cf[0], B, lower=True, check_finite=False)
        return W.T @ W

    def dense(self) -> np.ndarray:
        return self.V


class DayBlockCovariance:
    """V = G kron J_K + I_D kron Rstar, handled through the Woodbury identity.

    Solves cost O(D K^2 + D^3) instead of O((DK)^3). G may be singular
    (including all zeros); Rstar must be positive definite.
    """

    def __init__(self, G: np.ndarray, Rstar: np.ndarray):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.Rstar = np.atleast_2d(np.asarray(Rstar, dtype=float))
        self.D, self.K = self.G.shape[0], self.Rstar.shape[0]
        try:
            self._rc = linalg.cho_factor(self.Rstar, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise CovarianceNotPD("within-day covariance is not positive definite") from exc
        if not np.all(np.diag(self._rc[0]) > 0):
            raise CovarianceNotPD("within-day covariance is not positive definite")
        self.w = linalg.cho_solve(self._rc, np.ones(self.K), check_finite=False)
        self.s = float(self.w.sum())
        M = np.eye(self.D) + self.s * self.G
        try:
            self._mlu = linalg.lu_factor(M, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise CovarianceNotPD("day-level covariance is not positive semidefinite") from exc
        self.H = linalg.lu_solve(self._mlu, self.G, check_finite=False)
        sign, ld = np.linalg.slogdet(M)
        if sign <= 0:
            raise CovarianceNotPD("day-level covariance is not positive semidefinite")
        self._logdet = self.D * 2.0 * float(np.sum(np.log(np.diag(self._rc[0])))) + ld

    @property
    def n(self) -> int:
        return self.D * self.K

    def solve(self, B: np.ndarray) -> np.ndarray:
        B = np.asarray(B, dtype=float)
        vec = B.ndim == 1
        B2 = B.reshape(self.n, -1)
        m = B2.shape[1]
        blocks = B2.reshape(self.D, self.K, m)
        # A^{-1} B, one K x K solve per day stacked into a single call
        stacked = blocks.transpose(1, 0, 2).reshape(self.K, self.D * m)
        C = linalg.cho_solve(self._rc, stacked, check_finite=False)
        C = C.reshape(self.K, self.D, m).transpose(1, 0, 2)
        t = np.einsum("k,dkm->dm", self.w, blocks)
        u = self.H @ t
        C = C - self.w[None, :, None] * u[:, None, :]
        out = C.reshape(self.n, m)
        return out[:, 0] if vec else out

    def logdet(self) -> float:
        return self._logdet

    def stack(self, B: np.ndarray) -> np.ndarray:
        """Rearrange DK x m rows to K x (D m) so one triangular solve covers every day."""
        B = np.asarray(B, dtype=float).reshape(self.n, -1)
        m = B.shape[1]
        return np.ascontiguousarray(B.reshape(self.D, self.K, m).transpose(1, 0, 2).reshape(self.K, self.D * m))

    def gram(self, B: np.ndarray, stacked: np.ndarray | None = None) -> np.ndarray:
        """B' V^-1 B; pass ``stacked = self.stack(B)`` to reuse the rearrangement."""
        if stacked is None:
            stacked = self.stack(B)
        m = stacked.shape[1] // self.D
        if not hasattr(self, "_Linv"):
            self._Linv = linalg.solve_triangular(self._rc[0], np.eye(self.K), lower=True, check_finite=False)
        W = (self._Linv @ stacked).reshape(self.K * self.D, m)
        T = (self.w @ stacked).reshape(self.D, m)
        return W.T @ W - T.T @ (self.H @ T)

    def dense(self) -> np.ndarray:
        return np.kron(self.G, np.ones((self.K, self.K))) + np.kron(np.eye(self.D), self.Rstar)


def as_covariance(V) -> DenseCovariance | DayBlockCovariance:
    if isinstance(V, (DenseCovariance, DayBlockCovariance)):
        return V
    return DenseCovariance(V)


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class GlsSolution:
    beta: np.ndarray
    cov_beta: np.ndarray
    resid: np.ndarray
    quad: float
    logdet_V: float
    logdet_XtViX: float


def gls(y: np.ndarray, X: np.ndarray, V, stacked: np.ndarray | None = None) -> GlsSolution:
    """GLS fit of y on X. ``stacked`` is an optional pre-arranged [X, y] (see ``stack``)."""
    cov = as_covariance(V)
    p = X.shape[1]
    M = cov.gram(np.column_stack([X, y]) if stacked is None else None, stacked)
    XtViX, XtViy, ytViy = M[:p, :p], M[:p, p], M[p, p]
    try:
        cf = linalg.cho_factor(XtViX, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularDesign("X' V^-1 X is singular") from exc
    beta = linalg.cho_solve(cf, XtViy, check_finite=False)
    return GlsSolution(
        beta=beta,
        cov_beta=linalg.cho_solve(cf, np.eye(p), check_finite=False),
        resid=y - X @ beta,
        quad=float(ytViy - XtViy @ beta),
        logdet_V=cov.logdet(),
        logdet_XtViX=2.0 * float(np.sum(np.log(np.diag(cf[0])))),
    )


def _loglik_from(sol: GlsSolution, n: int, p: int, objective: str, logdet_XtX: float) -> float:
    if objective == "ml":
        return -0.5 * (n * LOG_2PI + sol.logdet_V + sol.quad)
    if objective != "reml":
        raise ValueError(f"objective must be 'reml' or 'ml', got {objective!r}")
    return -0.5 * ((n - p) * LOG_2PI + sol.logdet_V + sol.logdet_XtViX - logdet_XtX + sol.quad)


def log_likelihood(y: np.ndarray, X: np.ndarray, V, objective: str = "reml") -> float:
    """Gaussian log-likelihood at the GLS fixed effects.

    The REML form is the likelihood of orthonormal error contrasts, so it
    does not depend on how the column space of X is parameterized.
    """
    if objective not in ("reml", "ml"):
        raise ValueError(f"objective must be 'reml' or 'ml', got {objective!r}")
    n, p = X.shape
    return _loglik_from(gls(y, X, V), n, p, objective, float(np.linalg.slogdet(X.T @ X)[1]))


# parameter transforms: optimizer works on an unconstrained scale
_TO_FREE = {"var": np.log, "corr": np.arctanh, "real": lambda x: x}
_CORR_Z = float(np.arctanh(0.999))
_FROM_FREE = {"var": np.exp, "corr": np.tanh, "real": lambda x: x}


@dataclass
class FittedMixedModel:
    beta: np.ndarray
    beta_names: list[str]
    theta: dict[str, float]
    loglik: float
    converged: bool
    n_iter: int
    cov_beta: np.ndarray | None = None
    objective: str = "reml"
    spec: Any = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta": dict(zip(self.beta_names, map(float, self.beta))),
            "theta": {k: float(v) for k, v in self.theta.items()},
            "loglik": float(self.loglik),
            "objective": self.objective,
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "extra": _jsonable(self.extra),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def fit_gls(
    y: np.ndarray,
    X: np.ndarray,
    V_builder: Callable[[dict[str, float]], Any],
    theta0: Mapping[str, float],
    kinds: Mapping[str, str],
    objective: str = "reml",
    fixed: Mapping[str, float] | None = None,
    beta_names: Sequence[str] | None = None,
    maxiter: int = 500,
    rtol: float = 1e-8,
    n_starts: int = 3,
) -> FittedMixedModel:
    """Maximize the (restricted) likelihood over covariance parameters.

    ``theta0`` gives starting values for the free parameters, ``kinds``
    marks each as "var" (log scale), "corr" (atanh scale) or "real".
    ``fixed`` parameters are passed to ``V_builder`` unchanged. Nelder-Mead
    is run from ``n_starts`` deterministic starting points and the best
    optimum kept.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    fixed = dict(fixed or {})
    kept, dropped = alias_columns(X)
    if dropped:
        raise SingularDesign(f"design has aliased columns {dropped}")
    names = [k for k in theta0 if k not in fixed]
    n, p = X.shape
    ld_XtX = float(np.linalg.slogdet(X.T @ X)[1])
    B = np.column_stack([X, y])
    stacked = {}
    to_free = [_TO_FREE[kinds[k]] for k in names]
    # search box on the free scale: keeps the optimizer off the unit-root
    # ridge, where the likelihood is flat and the covariance degenerate
    scale = max(float(np.var(y)), 1e-8)
    box = {"var": (math.log(1e-10 * scale), math.log(1e4 * scale)), "corr": (-_CORR_Z, _CORR_Z), "real": (-30.0, 30.0)}
    lo = np.array([box[kinds[k]][0] for k in names])
    hi = np.array([box[kinds[k]][1] for k in names])
    from_free = [_FROM_FREE[kinds[k]] for k in names]

    def unpack(z):
        th = {k: float(f(v)) for k, f, v in zip(names, from_free, z)}
        th.update(fixed)
        return th

    def negll(z):
        if not np.all(np.isfinite(z)) or np.any(z < lo) or np.any(z > hi):
            return np.inf
        try:
            cov = as_covariance(V_builder(unpack(z)))
            key = (type(cov), getattr(cov, "D", None))
            if key not in stacked:
                stacked[key] = cov.stack(B)
            return -_loglik_from(gls(y, X, cov, stacked[key]), n, p, objective, ld_XtX)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return np.inf

    z0 = np.array([f(theta0[k]) for k, f in zip(names, to_free)], dtype=float)
    z0 = np.clip(z0, lo + 0.6, hi - 0.6)
    total_iter = 0
    converged = False
    best = None
    if names:
        offsets = [0.0, 0.5, -0.5][: max(n_starts, 1)]
        for off in offsets:
            start = z0 + off
            f0 = negll(start)
            if not np.isfinite(f0):
                continue
            res = optimize.minimize(
                negll,
                start,
                method="Nelder-Mead",
                options={
                    "maxiter": maxiter,
                    "xatol": 1e-5,
                    "fatol": rtol * (abs(f0) + 1.0),
                    "initial_simplex": start + np.vstack([np.zeros(len(start)), 0.3 * np.eye(len(start))]),
                },
            )
            total_iter += int(res.nit)
            converged = converged or bool(res.success)
            if best is None or res.fun < best.fun:
                best = res
        if best is None:
            raise CovarianceNotPD("no starting point gives a valid covariance")
        theta = unpack(best.x)
    else:
        theta = dict(fixed)
        converged = True
    V = V_builder(theta)
    sol = gls(y, X, V)
    ll = log_likelihood(y, X, V, objective)
    for k in names:
        if kinds[k] == "corr" and abs(theta[k]) > 0.998:
            warnings.warn(f"{k} estimate {theta[k]:.4f} is at the boundary", BoundaryWarning, stacklevel=2)
    return FittedMixedModel(
        beta=sol.beta,
        beta_names=list(beta_names) if beta_names is not None else [f"b{i}" for i in range(X.shape[1])],
        theta=theta,
        loglik=ll,
        converged=converged,
        n_iter=total_iter,
        cov_beta=sol.cov_beta,
        objective=objective,
    )


# ---------------------------------------------------------------------------
# prediction


@dataclass
class FutureBlock:
    """What the predictor needs to know about the cells being forecast.

    X: fixed design rows; cross: covariance between future and observed
    cells (n_new x n_obs); var: marginal variance of each future cell.
    """

    X: np.ndarray
    cross: np.ndarray
    var: np.ndarray
    dates: Sequence = ()
    periods: Sequence[int] = ()


def conditional_moments(y, X, V, fut: FutureBlock, include_beta_uncertainty: bool = True):
    """Mean and variance of future cells given the observed ones.

    With GLS fixed effects the variance is the universal-kriging form,
    which adds the estimation variance of the fixed effects.
    """
    cov = as_covariance(V)
    sol = gls(y, X, cov)
    Vi_resid = cov.solve(sol.resid)
    mean = fut.X @ sol.beta + fut.cross @ Vi_resid
    Vi_C = cov.solve(fut.cross.T)  # n_obs x n_new
    var = fut.var - np.einsum("ij,ji->i", fut.cross, Vi_C)
    if include_beta_uncertainty:
        B = fut.X - Vi_C.T @ X
        var = var + np.einsum("ij,jk,ik->i", B, sol.cov_beta, B)
    return mean, np.maximum(var, 0.0)


class ForecastSet:
    """Per-(date, period) forecasts on the count scale, with the Gaussian working values."""

    columns = ["date", "period", "point", "lower", "upper", "point_transformed", "sd_transformed"]

    def __init__(self, frame: pd.DataFrame):
        frame = frame.reset_index(drop=True)
        missing = [c for c in self.columns if c not in frame.columns]
        if missing:
            raise ValueError(f"forecast frame missing {missing}")
        pts, lo, hi = (frame[c].to_numpy(float) for c in ("point", "lower", "upper"))
        if np.any(lo > pts + 1e-9) or np.any(pts > hi + 1e-9) or np.any(lo < 0):
            raise ValueError("forecast intervals must satisfy 0 <= lower <= point <= upper")
        self.frame = frame[self.columns]

    @classmethod
    def from_transformed(cls, dates, periods, mean_t, sd_t, level: float) -> "ForecastSet":
        if not 0 < level < 1:
            raise LevelOutOfRange(f"level must lie in (0, 1), got {level}")
        z = stats.norm.ppf(0.5 + level / 2)
        mean_t = np.asarray(mean_t, dtype=float)
        sd_t = np.asarray(sd_t, dtype=float)
        return cls(
            pd.DataFrame(
                {
                    "date": list(dates),
                    "period": np.asarray(periods, dtype=int),
                    "point": inverse_transform(mean_t),
                    "lower": inverse_transform(mean_t - z * sd_t),
                    "upper": inverse_transform(mean_t + z * sd_t),
                    "point_transformed": mean_t,
                    "sd_transformed": sd_t,
                }
            )
        )

    @classmethod
    def concat(cls, sets: Sequence["ForecastSet"]) -> "ForecastSet":
        return cls(pd.concat([s.frame for s in sets], ignore_index=True))

    def __len__(self) -> int:
        return len(self.frame)

    def day_grid(self, column: str = "point") -> tuple[list, np.ndarray]:
        """Pivot a column to a (days x periods) grid."""
        wide = self.frame.pivot(index="date", columns="period", values=column).sort_index()
        return list(wide.index), wide.to_numpy(float)

    def to_csv(self, path) -> None:
        out = self.frame[["date", "period", "point", "lower", "upper"]].copy()
        out["date"] = [d.isoformat() if hasattr(d, "isoformat") else str(d) for d in out["date"]]
        out.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    @classmethod
    def read_csv(cls, path) -> "ForecastSet":
        import datetime as dt

        df = pd.read_csv(path)
        df["date"] = [dt.date.fromisoformat(d) for d in df["date"]]
        df["point_transformed"] = np.sqrt(df["point"] + 0.25)
        df["sd_transformed"] = np.nan
        return cls(df)


def predict_blup(
    fit: FittedMixedModel,
    y: np.ndarray,
    X: np.ndarray,
    V,
    future: FutureBlock,
    level: float = 0.95,
    include_beta_uncertainty: bool = True,
) -> ForecastSet:
    """Conditional-Gaussian forecasts of future cells, intervals mapped to counts.

    ``V`` must be the observed-cell covariance at the fitted parameters and
    ``future`` built from the same parameters.
    """
    if not 0 < level < 1:
        raise LevelOutOfRange(f"level must lie in (0, 1), got {level}")
    mean, var = conditional_moments(y, X, V, future, include_beta_uncertainty)
    return ForecastSet.from_transformed(future.dates, future.periods, mean, np.sqrt(var), level)
