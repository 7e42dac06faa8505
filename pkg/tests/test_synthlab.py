import datetime as dt

import numpy as np
import pytest

from callmix.staffing import erlang_a_exact
from callmix.synthlab import (
    GeneratorConfig,
    InvalidConfig,
    billing_calendar,
    generate_counts,
    generate_services,
    make_rng,
    simulate_erlang_a,
    sinusoid_counts,
    working_days,
)


def test_rng_is_mt19937():
    assert isinstance(make_rng(1).bit_generator, np.random.MT19937)
    assert make_rng(5).standard_normal() == make_rng(5).standard_normal()


def test_generator_is_deterministic():
    a, la = generate_counts(GeneratorConfig(D=10, K=6, seed=11))
    b, lb = generate_counts(GeneratorConfig(D=10, K=6, seed=11))
    c, _ = generate_counts(GeneratorConfig(D=10, K=6, seed=12))
    assert np.array_equal(a.counts, b.counts) and np.array_equal(la["gamma"], lb["gamma"])
    assert not np.array_equal(a.counts, c.counts)


def test_latent_root_rate_is_clamped():
    _, lat = generate_counts(GeneratorConfig(D=30, K=6, sigma_G2=2500.0, seed=1))
    raw = lat["fixed"] + lat["gamma"][:, None] + lat["eps"]
    assert raw.min() < 0.1
    assert np.allclose(np.sqrt(lat["lam"]), np.maximum(raw, 0.1))


def test_day_effects_follow_ar1_over_true_gaps():
    _, lat = generate_counts(GeneratorConfig(D=6000, K=1, sigma_R2=0.0, rho_G=0.6, seed=3))
    g = lat["gamma"]
    dates = working_days(dt.date(2004, 1, 4), 6000)
    one = np.array([(b - a).days == 1 for a, b in zip(dates, dates[1:])])
    r1 = np.corrcoef(g[:-1][one], g[1:][one])[0, 1]
    r2 = np.corrcoef(g[:-1][~one], g[1:][~one])[0, 1]  # Friday to Sunday spans two days
    assert abs(r1 - 0.6) < 0.04 and abs(r2 - 0.36) < 0.06
    assert abs(g.var() - 1.0) < 0.1


def test_working_days_skip_saturday():
    days = working_days(dt.date(2004, 1, 9), 3)
    assert days == [dt.date(2004, 1, 9), dt.date(2004, 1, 11), dt.date(2004, 1, 12)]


def test_billing_calendar_marks_cycles():
    days = billing_calendar(working_days(dt.date(2004, 3, 1), 26))
    assert days[0].flag("delivery_1") and not days[0].flag("billing_1")
    assert any(d.flag("billing_14") for d in days)


def test_invalid_configs():
    for cfg in (GeneratorConfig(D=0), GeneratorConfig(rho_G=1.0), GeneratorConfig(sigma_R2=-1.0),
                GeneratorConfig(K=4, profiles=np.ones((6, 5)))):
        with pytest.raises(InvalidConfig):
            generate_counts(cfg)


def test_services_and_sinusoid_shapes():
    days = billing_calendar(working_days(dt.date(2004, 1, 4), 5))
    s = generate_services(days, 8, seed=0)
    assert s.mean_service_time.shape == (5, 8) and s.mean_service_time.min() >= 0.2
    x = sinusoid_counts(4, 48, seed=0)
    assert x.counts.shape == (4, 48) and x.period_minutes == 15


def test_simulator_agrees_with_exact():
    sim = simulate_erlang_a(4.0, 1.0, 0.5, 4, horizon_minutes=20_000, warmup_minutes=500, seed=2)
    ex = erlang_a_exact(4.0, 1.0, 0.5, 4)
    assert abs(sim.p_wait - ex.p_wait) < 3 * sim.p_wait_se + 1e-3
    assert abs(sim.p_ab - ex.p_ab) < 3 * sim.p_ab_se + 1e-3
    assert abs(sim.e_wait - ex.e_wait) < 3 * sim.e_wait_se + 1e-3
    assert sim.arrivals == sim.served + sim.abandoned + sim.in_system_at_end
