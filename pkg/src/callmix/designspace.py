"""Fixed-effect design matrices and covariance kernels for the day-by-period model.

Rows are ordered day-major, period-minor: (d1,k1), ..., (d1,kK), (d2,k1), ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import BILLING_COLUMNS, DELIVERY_COLUMNS, WEEKDAY_NAMES, CalendarDay, PeriodSeries

THREE_PATTERN_GROUPS = {"Sun": (1,), "MonThu": (2, 3, 4, 5), "Fri": (6,)}
MULTI_PATTERN_GROUPS = {name[:3]: (i,) for i, name in enumerate(WEEKDAY_NAMES, start=1)}
EXOGENOUS_COLUMNS = DELIVERY_COLUMNS + BILLING_COLUMNS + ("global_delivery",)


class DesignError(ValueError):
    pass


class EmptySeries(DesignError):
    pass


class AllAliased(DesignError):
    pass


class DomainError(ValueError):
    pass


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FixedEffectsSpec:
    pattern_mode: str = "three"  # "three" | "multi"
    exogenous_columns: tuple[str, ...] = ()
    include_weekday_levels: bool = True

    def __post_init__(self):
        if self.pattern_mode not in ("three", "multi"):
            raise ValueError(f"pattern_mode must be 'three' or 'multi', got {self.pattern_mode!r}")
        object.__setattr__(self, "exogenous_columns", tuple(self.exogenous_columns))
        unknown = [c for c in self.exogenous_columns if c not in EXOGENOUS_COLUMNS]
        if unknown:
            raise ValueError(f"unknown exogenous columns {unknown}")

    @property
    def groups(self) -> dict[str, tuple[int, ...]]:
        return THREE_PATTERN_GROUPS if self.pattern_mode == "three" else MULTI_PATTERN_GROUPS


@dataclass(frozen=True)
class CovarianceSpec:
    intra_structure: str = "ar1"  # "ar1" | "arma11" | "indep"
    inter_structure: str = "ar1"  # "ar1" | "none"
    sigma2_mode: str = "fixed"  # "fixed" | "estimate"
    sigma2_value: float = 0.25
    # re-fit the day-level model with its noise variance implied by the
    # within-day estimates, then re-fit the within-day model once more
    u_refine: bool = True

    def __post_init__(self):
        if self.intra_structure not in ("ar1", "arma11", "indep"):
            raise ValueError(f"bad intra_structure {self.intra_structure!r}")
        if self.inter_structure not in ("ar1", "none"):
            raise ValueError(f"bad inter_structure {self.inter_structure!r}")
        if self.sigma2_mode not in ("fixed", "estimate"):
            raise ValueError(f"bad sigma2_mode {self.sigma2_mode!r}")


@dataclass
class DesignBundle:
    X_D: np.ndarray
    X_P: np.ndarray
    Z: np.ndarray
    row_index: list[tuple[int, int]]
    names_D: list[str]
    names_P: list[str]
    kept: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return self.names_D + self.names_P

    def full(self) -> np.ndarray:
        return np.hstack([self.X_D, self.X_P])

    def X(self, columns: Sequence[str] | None = None) -> np.ndarray:
        """Combined fixed design restricted to ``columns`` (default: the kept set)."""
        columns = self.kept if columns is None else columns
        lookup = {n: i for i, n in enumerate(self.names)}
        return self.full()[:, [lookup[c] for c in columns]]

    @property
    def ranks(self) -> dict[str, int]:
        return {
            "X_D": int(np.linalg.matrix_rank(self.X_D)) if self.X_D.size else 0,
            "X_P": int(np.linalg.matrix_rank(self.X_P)) if self.X_P.size else 0,
            "X": len(self.kept),
        }


def day_level_design(days: Sequence[CalendarDay], fx: FixedEffectsSpec) -> tuple[np.ndarray, list[str]]:
    """The D x (6 + r) matrix [W, F_D] with its column names."""
    cols, names = [], []
    if fx.include_weekday_levels:
        wd = np.array([d.weekday_index for d in days])
        for j, name in enumerate(WEEKDAY_NAMES, start=1):
            cols.append((wd == j).astype(float))
            names.append(f"W[{name}]")
    for c in fx.exogenous_columns:
        cols.append(np.array([float(d.flag(c)) for d in days]))
        names.append(c)
    mat = np.column_stack(cols) if cols else np.zeros((len(days), 0))
    return mat, names


def period_design(days: Sequence[CalendarDay], K: int, fx: FixedEffectsSpec) -> tuple[np.ndarray, list[str]]:
    """The DK x m intra-day profile matrix, one K-block of columns per weekday group."""
    wd = np.array([d.weekday_index for d in days])
    blocks, names = [], []
    for gname, members in fx.groups.items():
        ind = np.isin(wd, members).astype(float)
        blocks.append(np.kron(ind[:, None], np.eye(K)))
        names.extend(f"P[{gname},{k}]" for k in range(1, K + 1))
    return np.hstack(blocks), names


def alias_columns(X: np.ndarray, tol: float = 1e-9) -> tuple[list[int], list[int]]:
    """Scan columns left to right; a column in the span of those before it is aliased.

    Returns (kept, dropped) column indices. Within any linear dependency the
    last-listed member is the one dropped.
    """
    n = X.shape[0]
    basis = np.zeros((n, 0))
    kept, dropped = [], []
    for j in range(X.shape[1]):
        v = X[:, j].astype(float)
        norm = np.linalg.norm(v)
        if norm == 0:
            dropped.append(j)
            continue
        r = v - basis @ (basis.T @ v)
        r = r - basis @ (basis.T @ r)
        rn = np.linalg.norm(r)
        if rn <= tol * norm:
            dropped.append(j)
        else:
            basis = np.column_stack([basis, r / rn])
            kept.append(j)
    return kept, dropped


def build_designs(series: PeriodSeries | Sequence[CalendarDay], fx: FixedEffectsSpec, K: int | None = None) -> DesignBundle:
    if isinstance(series, PeriodSeries):
        days, K = series.days, series.K
    else:
        days = tuple(series)
        if K is None:
            raise ValueError("K is required when passing a day list")
    if len(days) == 0:
        raise EmptySeries("no days to build a design from")
    day_mat, names_D = day_level_design(days, fx)
    X_D = np.kron(day_mat, np.ones((K, 1)))
    X_P, names_P = period_design(days, K, fx)
    D = len(days)
    Z = np.kron(np.eye(D), np.ones((K, 1)))
    bundle = DesignBundle(
        X_D=X_D,
        X_P=X_P,
        Z=Z,
        row_index=[(d, k) for d in range(D) for k in range(K)],
        names_D=names_D,
        names_P=names_P,
    )
    kept, dropped = alias_columns(bundle.full())
    if not kept:
        raise AllAliased("no identifiable fixed effects")
    bundle.kept = [bundle.names[i] for i in kept]
    bundle.dropped = [bundle.names[i] for i in dropped]
    return bundle


# ---------------------------------------------------------------------------
# covariance kernels


def ar1_kernel(sigma2: float, rho: float, gaps) -> np.ndarray:
    """sigma2 * rho ** gap, elementwise over a symmetric gap grid."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if not -1 < rho < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    gaps = np.asarray(gaps, dtype=float)
    return sigma2 * np.power(rho, gaps)


def unit_gaps(K: int) -> np.ndarray:
    idx = np.arange(K)
    return np.abs(idx[:, None] - idx[None, :]).astype(float)


def arma11_kernel(sigma2: float, delta: float, rho: float, K: int, check: bool = True) -> np.ndarray:
    """Variance sigma2 on the diagonal, sigma2 * delta * rho ** (h - 1) at lag h >= 1."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if not -1 < rho < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    h = unit_gaps(K)
    R = sigma2 * delta * np.power(rho, np.maximum(h - 1, 0))
    np.fill_diagonal(R, sigma2)
    if check:
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"ARMA(1,1) kernel not positive definite (delta={delta}, rho={rho})") from exc
    return R


def daily_noise_variance(R: np.ndarray, sigma2: float) -> float:
    """Variance of a day's mean residual: (1/K) * (sum(R) / K + sigma2)."""
    K = R.shape[0]
    return (R.sum() / K + sigma2) / K


def assemble_V(G: np.ndarray, R: np.ndarray, sigma2: float) -> np.ndarray:
    """G kron J_K + I_D kron R + sigma2 * I."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if G.shape[0] != G.shape[1] or R.shape[0] != R.shape[1]:
        raise DimensionMismatch(f"G {G.shape} and R {R.shape} must be square")
    D, K = G.shape[0], R.shape[0]
    return np.kron(G, np.ones((K, K))) + np.kron(np.eye(D), R) + sigma2 * np.eye(D * K)
