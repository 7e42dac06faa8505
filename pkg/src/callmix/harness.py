"""Rolling-origin backtests with per-day RMSE, APE, coverage and width."""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from .dataio import NonDivisor, PeriodSeries, aggregate_resolution, disaggregate_forecast
from .forecaster import ModelSpec, run_pipeline
from .gausslik import ForecastSet

MEASURES = ("rmse", "ape", "cover", "width")
STATS = ("Q1", "median", "mean", "Q3")
KEYS = ("model", "lead", "resolution")


@dataclass(frozen=True)
class DayScore:
    rmse: float
    ape: float
    cover: float
    width: float
    n_zero_truth: int


def score_arrays(point, truth, lower=None, upper=None) -> DayScore:
    """Day-level measures from aligned per-period arrays.

    APE skips zero-truth cells (counted in ``n_zero_truth``); coverage and
    width are NaN when no interval is given.
    """
    point = np.asarray(point, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if point.shape != truth.shape or point.ndim != 1 or len(point) == 0:
        raise ValueError(f"prediction {point.shape} and truth {truth.shape} must be aligned 1-d arrays")
    err = point - truth
    rmse = float(np.sqrt(np.mean(err**2)))
    nz = truth != 0
    ape = float(np.mean(100.0 * np.abs(err[nz]) / truth[nz])) if nz.any() else float("nan")
    if lower is None or upper is None:
        cover = width = float("nan")
    else:
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.all(np.isnan(lower)) or np.all(np.isnan(upper)):
            cover = width = float("nan")
        else:
            cover = float(np.mean((truth >= lower) & (truth <= upper)))
            width = float(np.mean(upper - lower))
    return DayScore(rmse, ape, cover, width, int((~nz).sum()))


def score_day(pred: ForecastSet | pd.DataFrame, truth) -> DayScore:
    """Score one day's forecast rows (ordered by period) against its K counts."""
    frame = pred.frame if isinstance(pred, ForecastSet) else pred
    frame = frame.sort_values("period")
    if len(frame) != len(np.atleast_1d(truth)):
        raise ValueError(f"{len(frame)} forecast periods for {len(np.atleast_1d(truth))} observed")
    return score_arrays(frame["point"], truth, frame["lower"], frame["upper"])


# ---------------------------------------------------------------------------
# summaries


@dataclass
class EvalSummary:
    days: pd.DataFrame
    failures: list[dict] = field(default_factory=list)
    attempted: dict[str, int] = field(default_factory=dict)

    @property
    def scored(self) -> dict[str, int]:
        return {str(k): int(v) for k, v in self.days.groupby("model").size().items()} if len(self.days) else {}

    def summary(self, by: Sequence[str] = KEYS) -> pd.DataFrame:
        """Long table of (keys..., measure, stat, value) with Q1, median, mean, Q3 per group."""
        rows = []
        if len(self.days) == 0:
            return pd.DataFrame(columns=[*by, "measure", "stat", "value"])
        for key, grp in self.days.groupby(list(by), sort=True):
            key = key if isinstance(key, tuple) else (key,)
            for m in MEASURES:
                vals = grp[m].to_numpy(float)
                vals = vals[~np.isnan(vals)]
                if len(vals):
                    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
                    stats = (q1, med, float(vals.mean()), q3)
                else:
                    stats = (np.nan,) * 4
                for s, v in zip(STATS, stats):
                    rows.append({**dict(zip(by, key)), "measure": m, "stat": s, "value": float(v)})
        return pd.DataFrame(rows)

    def long(self) -> pd.DataFrame:
        """Per-day values in long format: model, lead, resolution, date, measure, value."""
        out = self.days.melt(
            id_vars=["model", "lead", "resolution", "date"], value_vars=list(MEASURES), var_name="measure"
        )
        return out.sort_values(["model", "lead", "resolution", "date", "measure"], kind="stable").reset_index(drop=True)

    def write(self, out_dir) -> dict[str, str]:
        """Write days.csv, summary.csv, failures.csv and summary.json; returns the paths."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "days": out / "days.csv",
            "summary": out / "summary.csv",
            "failures": out / "failures.csv",
            "json": out / "summary.json",
        }
        long = self.long()
        long["date"] = [d.isoformat() for d in long["date"]]
        long.to_csv(paths["days"], index=False, float_format="%.10g", lineterminator="\n")
        self.summary().to_csv(paths["summary"], index=False, float_format="%.10g", lineterminator="\n")
        pd.DataFrame(self.failures, columns=["model", "lead", "resolution", "origin", "error"]).to_csv(
            paths["failures"], index=False, lineterminator="\n"
        )
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return {k: str(v) for k, v in paths.items()}

    def to_dict(self) -> dict:
        summ = self.summary()
        return {
            "attempted_days": self.attempted,
            "scored_days": self.scored,
            "zero_truth_cells": int(self.days["n_zero_truth"].sum()) if len(self.days) else 0,
            "failures": len(self.failures),
            "summary": [
                {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in summ.to_dict("records")
            ],
        }

    @classmethod
    def merge(cls, parts: Iterable["EvalSummary"]) -> "EvalSummary":
        parts = list(parts)
        days = pd.concat([p.days for p in parts], ignore_index=True) if parts else _empty_days()
        attempted: dict[str, int] = {}
        for p in parts:
            for k, v in p.attempted.items():
                attempted[k] = attempted.get(k, 0) + v
        return cls(_sorted(days), [f for p in parts for f in p.failures], attempted)


_DAY_COLUMNS = ["model", "lead", "resolution", "origin", "date", "weekday", *MEASURES, "n_zero_truth"]


def _empty_days() -> pd.DataFrame:
    return pd.DataFrame(columns=_DAY_COLUMNS)


def _sorted(days: pd.DataFrame) -> pd.DataFrame:
    if len(days) == 0:
        return _empty_days()
    return days.sort_values(["model", "lead", "resolution", "date"], kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------------------
# evaluation tasks


@dataclass(frozen=True)
class _Task:
    spec: ModelSpec
    origin: dt.date
    factor: int = 1


def _run_task(task: _Task, data: PeriodSeries) -> dict[str, Any]:
    """Forecast one origin and score its regular days at the grain of ``data``."""
    spec, origin, factor = task.spec, task.origin, task.factor
    resolution = data.period_minutes * factor
    tag = {"model": spec.label, "lead": spec.lead_time_days, "resolution": resolution}
    end = origin + dt.timedelta(days=spec.horizon_days - 1)
    horizon = [i for i, d in enumerate(data.days) if origin <= d.date <= end and not d.is_outlier]
    try:
        source = data if factor == 1 else aggregate_resolution(data, factor)
        fs = run_pipeline(spec, source, origin)
    except Exception as exc:  # isolate: one bad window must not sink the study
        return {"rows": [], "attempted": len(horizon),
                "failure": {**tag, "origin": origin.isoformat(), "error": f"{type(exc).__name__}: {exc}"}}
    rows = []
    for i in horizon:
        day = data.days[i]
        f = fs.frame[fs.frame["date"] == day.date].sort_values("period")
        if len(f) == 0:
            continue
        point, lower, upper = (disaggregate_forecast(f[c].to_numpy(float), factor) for c in ("point", "lower", "upper"))
        s = score_arrays(point, data.counts[i], lower, upper)
        rows.append({**tag, "origin": origin, "date": day.date, "weekday": day.weekday_index,
                     **dataclasses.asdict(s)})
    return {"rows": rows, "attempted": len(horizon), "failure": None}


def _call(args):
    return _run_task(*args)


def _evaluate(tasks: Sequence[_Task], data: PeriodSeries, executor=None) -> EvalSummary:
    mapper = executor.map if executor is not None else map
    results = list(mapper(_call, [(t, data) for t in tasks]))
    rows, failures, attempted = [], [], {}
    for t, r in zip(tasks, results):
        rows.extend(r["rows"])
        attempted[t.spec.label] = attempted.get(t.spec.label, 0) + r["attempted"]
        if r["failure"] is not None:
            failures.append(r["failure"])
    days = pd.DataFrame(rows, columns=_DAY_COLUMNS) if rows else _empty_days()
    failures.sort(key=lambda f: (f["model"], f["lead"], f["resolution"], f["origin"]))
    return EvalSummary(_sorted(days), failures, attempted)


def default_origins(spec: ModelSpec, data: PeriodSeries) -> list[dt.date]:
    """Every regular day whose learning window fits inside the data."""
    start = data.days[0].date
    return [
        d.date for d in data.days
        if not d.is_outlier and spec.learning_window(d.date)[0] >= start
    ]


def rolling_eval(
    specs: ModelSpec | Sequence[ModelSpec],
    data: PeriodSeries,
    origins: Sequence[dt.date] | None = None,
    executor=None,
) -> EvalSummary:
    """Refit and forecast at every origin for every spec; score out-of-sample regular days.

    ``executor`` is anything with a ``map`` method (e.g. a process pool);
    results are reduced in task order, so output does not depend on it.
    """
    specs = [specs] if isinstance(specs, ModelSpec) else list(specs)
    tasks = [
        _Task(s, o)
        for s in specs
        for o in (origins if origins is not None else default_origins(s, data))
    ]
    return _evaluate(tasks, data, executor)


def lead_time_sweep(
    spec: ModelSpec,
    leads: Sequence[int],
    data: PeriodSeries,
    origins: Sequence[dt.date] | None = None,
    executor=None,
) -> EvalSummary:
    """rolling_eval with the lead time overridden; group the result by ("weekday", "lead")."""
    specs = [dataclasses.replace(spec, lead_time_days=int(L)) for L in leads]
    return rolling_eval(specs, data, origins, executor)


def resolution_sweep(
    spec: ModelSpec,
    factors: Sequence[int],
    base: PeriodSeries,
    origins: Sequence[dt.date] | None = None,
    executor=None,
) -> EvalSummary:
    """Forecast at coarser grains, split forecasts equally, score at the base grain."""
    bad = [f for f in factors if int(f) < 1 or base.K % int(f)]
    if bad:
        raise NonDivisor(f"factors {bad} do not divide K={base.K}")
    origins = list(origins) if origins is not None else default_origins(spec, base)
    tasks = [_Task(spec, o, int(f)) for f in factors for o in origins]
    return _evaluate(tasks, base, executor)
