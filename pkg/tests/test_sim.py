from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from glucocast.series import Variable
from glucocast.sim import (COHORT_RANGES, PatientParams, Scenario, SimInputs, SimState, default_cohort, export,
                           import_record, integrate, parse_scenario, rate_of_appearance, simulate_cohort,
                           simulate_patient, step_ode)

QUIET = PatientParams(cgm_noise_sd=0.0, dawn_amp=0.0)


def test_fixed_point_one_step():
    p = PatientParams()
    s = step_ode(SimState.equilibrium(p), p, dawn=False)
    for a, b in zip((s.G, s.X, s.I, s.Q1, s.Q2), (p.Gb, 0, p.Ib, 0, 0)):
        assert abs(a - b) < 1e-9


def test_step_rejects_nan_and_negative_time():
    p = PatientParams()
    with pytest.raises(ValueError):
        step_ode(SimState(float("nan"), 0, 10), p)
    with pytest.raises(ValueError):
        step_ode(SimState.equilibrium(p), p, t_s=-1)


def test_param_validation():
    with pytest.raises(ValueError):
        PatientParams(p1=0)
    with pytest.raises(ValueError):
        PatientParams(A_g=1.5)
    with pytest.raises(ValueError):
        PatientParams(Gb=200)
    with pytest.raises(ValueError):
        Scenario(days=0)
    with pytest.raises(ValueError):
        Scenario(exercise_sessions=((18.0, 30.0, 1.5),))


def test_carbs_raise_glucose():
    p = QUIET
    carbs = np.zeros(30)
    carbs[0] = 40.0
    with_meal = integrate(p, 30, carbs=carbs, dawn=False)[:, 0]
    without = integrate(p, 30, dawn=False)[:, 0]
    assert np.all(with_meal[2:] > without[2:])
    assert np.all(np.diff(with_meal[1:]) > 0)


def test_bolus_lowers_glucose_at_two_hours():
    p = QUIET
    u = np.zeros(120)
    u[0] = 3.0
    assert integrate(p, 120, insulin=u, dawn=False)[-1, 0] < integrate(p, 120, dawn=False)[-1, 0]


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 4.0), st.floats(0.1, 3.0))
def test_monotone_dose_response(small, extra):
    p = QUIET
    carbs = np.zeros(180)
    carbs[0] = 60.0
    lo, hi = np.zeros(180), np.zeros(180)
    lo[0], hi[0] = small, small + extra
    g_lo = integrate(p, 180, insulin=lo, carbs=carbs, dawn=False)[:, 0]
    g_hi = integrate(p, 180, insulin=hi, carbs=carbs, dawn=False)[:, 0]
    assert np.all(g_hi <= g_lo + 1e-12)


def test_zero_input_equilibrium_24h():
    rec = simulate_patient(QUIET, Scenario.basal_only(days=1), seed=3)
    g = rec[Variable.GLUCOSE].values
    assert len(g) == 288 and np.abs(g - QUIET.Gb).max() < 1e-6


def test_basal_only_stays_within_dawn_envelope():
    p = PatientParams(cgm_noise_sd=0.0, dawn_amp=20.0)
    g = simulate_patient(p, Scenario.basal_only(days=2), seed=0)[Variable.GLUCOSE].values
    assert g.min() >= p.Gb - 1e-6 and g.max() <= p.Gb + p.dawn_amp


def test_carb_mass_recovered():
    p = QUIET
    minutes = 900
    carbs = np.zeros(minutes)
    carbs[0] = 50.0
    traj = integrate(p, minutes, carbs=carbs, dawn=False)
    ra = np.array([rate_of_appearance(q2, p) for q2 in traj[:, 4]])
    assert trapezoid(ra, dx=1.0) == pytest.approx(p.A_g * 50.0 * 1000.0, rel=0.01)


def test_fourteen_day_shape():
    rec = simulate_patient(PatientParams(), Scenario(days=14), seed=1)
    g = rec[Variable.GLUCOSE]
    assert len(g) == 4032 and g.step_s == 300
    assert 0 < np.isnan(g.values).sum() < 400
    assert set(rec.series) == {Variable.GLUCOSE, Variable.INSULIN_BOLUS, Variable.CARBS, Variable.EXERCISE,
                               Variable.HEART_RATE, Variable.SLEEP, Variable.SCHEDULE}
    sched = rec[Variable.SCHEDULE].values
    assert sched.min() >= 0 and sched.max() < 24
    assert set(np.unique(rec[Variable.SLEEP].values)) <= {0.0, 1.0}
    ex = rec[Variable.EXERCISE].values
    assert ex.min() >= 0 and ex.max() <= 1
    assert np.nanmin(g.values) >= 20 - 4 * 5


def test_same_seed_bit_identical():
    a = simulate_patient(PatientParams(), Scenario(days=2), seed=5)
    b = simulate_patient(PatientParams(), Scenario(days=2), seed=5)
    c = simulate_patient(PatientParams(), Scenario(days=2), seed=6)
    assert a == b and not a == c


def test_cohort_ranges_and_determinism():
    ps = default_cohort(25, seed=0)
    assert len(set(ps)) == 25
    for p in ps:
        for k, (lo, hi) in COHORT_RANGES.items():
            assert lo <= getattr(p, k) <= hi
    assert default_cohort(25, 0) == ps and default_cohort(25, 1) != ps
    assert len(default_cohort(1, 0)) == 1


def test_cohort_records(tmp_path):
    recs = simulate_cohort(2, days=1, seed=4)
    assert [r.patient_id for r in recs] == ["P000", "P001"]
    export(recs[0], tmp_path / "p.csv")
    assert import_record(tmp_path / "p.csv") == recs[0]


def test_parse_scenario():
    sc = parse_scenario("""
        days = 3   # short run
        meals = 07:30 40, 12:00 70
        exercise = 18:00 30 0.5
        sleep_window = 22:30 06:45
        jitter.missed_bolus_prob = 0
    """)
    assert sc.days == 3 and sc.meals == ((7.5, 40.0), (12.0, 70.0))
    assert sc.exercise_sessions == ((18.0, 30.0, 0.5),) and sc.sleep_window == (22.5, 6.75)
    assert sc.jitter.missed_bolus_prob == 0
    with pytest.raises(ValueError, match="line 1"):
        parse_scenario("colour = blue")


def test_meal_bolus_planted():
    """Boluses accompany meals, so insulin is present whenever carbs are."""
    rec = simulate_patient(replace(PatientParams(), cgm_noise_sd=0.0), Scenario(days=3), seed=2)
    assert len(rec[Variable.CARBS]) >= 9 and len(rec[Variable.INSULIN_BOLUS]) >= 8
