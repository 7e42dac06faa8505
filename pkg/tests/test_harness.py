import dataclasses
import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from callmix.dataio import NonDivisor, PeriodSeries
from callmix.designspace import FixedEffectsSpec
from callmix.forecaster import ModelSpec
from callmix.harness import EvalSummary, lead_time_sweep, resolution_sweep, rolling_eval, score_arrays, score_day
from callmix.synthlab import GeneratorConfig, generate_counts


def _pred(points, lower=None, upper=None):
    n = len(points)
    return pd.DataFrame({"date": [dt.date(2004, 1, 4)] * n, "period": range(1, n + 1), "point": points,
                         "lower": lower if lower is not None else [np.nan] * n,
                         "upper": upper if upper is not None else [np.nan] * n})


def test_score_day_single_period():
    s = score_day(_pred([110.0], [80.0], [120.0]), [100])
    assert (s.rmse, s.ape, s.cover, s.width) == (10.0, 10.0, 1.0, 40.0)


def test_score_day_two_periods():
    s = score_day(_pred([110.0, 195.0]), [100, 200])
    assert np.isclose(s.rmse, np.sqrt((100 + 25) / 2)) and np.isclose(s.ape, 6.25)
    assert np.isnan(s.cover) and np.isnan(s.width)


@given(st.lists(st.tuples(st.floats(0, 1e4), st.integers(1, 1e4)), min_size=1, max_size=30), st.randoms())
def test_scores_invariant_to_period_order(cells, rnd):
    p, t = map(np.array, zip(*cells))
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    a, b = score_arrays(p, t, p - 1, p + 1), score_arrays(p[perm], t[perm], p[perm] - 1, p[perm] + 1)
    assert np.isclose(a.rmse, b.rmse) and np.isclose(a.ape, b.ape) and a.cover == b.cover


def test_zero_truth_cells_skip_ape():
    s = score_arrays([5.0, 110.0], [0, 100])
    assert s.ape == 10.0 and s.n_zero_truth == 1


@pytest.fixture(scope="module")
def data():
    return generate_counts(GeneratorConfig(D=60, K=4, seed=7, outlier_days=(50,)))[0]


SPEC = ModelSpec(FixedEffectsSpec("three"), learn_window_days=28, lead_time_days=7)


def test_single_origin_gives_single_row(data):
    res = rolling_eval(SPEC, data, [data.days[45].date])
    assert len(res.days) == 1 and res.failures == []
    summ = res.summary()
    assert set(summ["stat"]) == {"Q1", "median", "mean", "Q3"}


def test_failures_are_isolated(data):
    origins = [data.days[2].date, data.days[45].date]
    res = rolling_eval(SPEC, data, origins)
    assert len(res.days) == 1 and len(res.failures) == 1
    assert res.attempted == {"mixed": 2}


def test_outlier_days_are_not_scored(data):
    res = rolling_eval(dataclasses.replace(SPEC, pipeline="industry"), data, [data.days[50].date])
    assert len(res.days) == 0 and res.attempted == {"industry": 0}


def test_lead_sweep_matches_rolling_eval(data):
    origins = [d.date for d in data.days[40:44]]
    a = lead_time_sweep(SPEC, [7], data, origins)
    b = rolling_eval(SPEC, data, origins)
    pd.testing.assert_frame_equal(a.days, b.days)


def test_factor_on_uniform_periods_matches_base():
    base = generate_counts(GeneratorConfig(D=50, K=4, seed=2))[0]
    doubled = PeriodSeries(base.days, np.repeat(base.counts, 2, axis=1) * 1, 15)
    spec = dataclasses.replace(SPEC, pipeline="industry")
    origins = [d.date for d in base.days[40:45]]
    coarse = resolution_sweep(spec, [2], doubled, origins).days
    direct = resolution_sweep(spec, [1], PeriodSeries(base.days, base.counts * 2, 30), origins).days
    # an even split of twice the count reproduces the per-period count exactly
    assert np.allclose(coarse["rmse"], direct["rmse"] / 2)
    assert np.allclose(coarse["ape"], direct["ape"])


def test_non_divisor_rejected_upfront(data):
    with pytest.raises(NonDivisor):
        resolution_sweep(SPEC, [3], data)


def test_write_and_merge(tmp_path, data):
    origins = [d.date for d in data.days[40:43]]
    parts = [rolling_eval(SPEC, data, [o]) for o in origins]
    merged = EvalSummary.merge(parts)
    whole = rolling_eval(SPEC, data, origins)
    pd.testing.assert_frame_equal(merged.days, whole.days)
    paths = whole.write(tmp_path)
    assert set(paths) == {"days", "summary", "failures", "json"}
    assert pd.read_csv(paths["days"]).shape[0] == 3 * 4


@pytest.fixture(scope="module")
def persistent():
    return generate_counts(GeneratorConfig(D=160, K=12, rho_G=0.8, sigma_G2=2.0, seed=22))[0]


@pytest.mark.slow
def test_short_lead_beats_long_lead_when_days_persist(persistent):
    spec = ModelSpec(FixedEffectsSpec("three"), learn_window_days=42, lead_time_days=7)
    origins = [d.date for d in persistent.days[60:]]
    res = lead_time_sweep(spec, [1, 7], persistent, origins)
    med = res.days.groupby("lead")["rmse"].median()
    assert med[1] < med[7]


@pytest.mark.slow
def test_day_effect_helps_at_lead_one(persistent):
    with_day = ModelSpec(FixedEffectsSpec("three"), learn_window_days=42, lead_time_days=1, name="ar1")
    without = dataclasses.replace(with_day, cov=dataclasses.replace(with_day.cov, inter_structure="none"), name="none")
    # Poisson noise is as large as the day-effect gain per cell, so this needs ~100 days
    origins = [d.date for d in persistent.days[60:]]
    med = rolling_eval([with_day, without], persistent, origins).days.groupby("model")["rmse"].median()
    assert med["ar1"] < med["none"]
