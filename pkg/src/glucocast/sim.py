"""Synthetic type-1-diabetes patients.

A Bergman-style minimal model (glucose, remote insulin action, plasma insulin)
with a two-compartment gut, a dawn-phenomenon term and an exercise uptake
multiplier is integrated with RK4 at one-minute steps. A CGM sensor model
(delay, Gaussian noise, dropouts) samples glucose every five minutes; a
smartband model produces exercise intensity, heart rate, sleep state and
hour of day.

Insulin inputs are deviations from the basal infusion that holds plasma
insulin at ``Ib``, so a basal-only scenario sits exactly at equilibrium.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _seeds
from .series import (
    BASE_STEP_S,
    EventSeries,
    PatientRecord,
    UniformSeries,
    Variable,
    read_csv,
    write_csv,
)

log = logging.getLogger(__name__)

EPOCH_2021_03_01 = 1614556800
G_FLOOR = 20.0
ODE_STEP_S = 60


@dataclass(frozen=True)
class PatientParams:
    Gb: float = 120.0          # basal glucose, mg/dL
    Ib: float = 10.0           # basal plasma insulin, mU/L
    p1: float = 0.03           # glucose effectiveness, 1/min
    p2: float = 0.02           # remote insulin decay, 1/min
    p3: float = 2.0e-5         # insulin sensitivity gain, (mU/L)^-1 min^-2
    n_clr: float = 0.14        # insulin clearance, 1/min
    V_g: float = 120.0         # glucose distribution volume, dL
    V_i: float = 12.0          # insulin distribution volume, L
    t_max_meal: float = 45.0   # gut absorption time constant, min
    A_g: float = 0.8           # carb bioavailability
    cgm_noise_sd: float = 5.0  # mg/dL
    cgm_delay_min: float = 10.0
    dawn_amp: float = 15.0     # mg/dL
    sleep_deficit_resistance: float = 0.03  # per missing hour of sleep

    def __post_init__(self):
        for name in ("Ib", "p1", "p2", "p3", "n_clr", "V_g", "V_i", "t_max_meal"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive rate/volume, got {v}")
        if not 0 < self.A_g <= 1:
            raise ValueError("A_g must lie in (0, 1]")
        if not 70 <= self.Gb <= 180:
            raise ValueError("Gb must lie in [70, 180] mg/dL")
        if self.cgm_noise_sd < 0 or self.cgm_delay_min < 0 or self.dawn_amp < 0:
            raise ValueError("noise, delay and dawn amplitude must be non-negative")
        if self.sleep_deficit_resistance < 0:
            raise ValueError("sleep_deficit_resistance must be non-negative")


# documented sampling ranges for default_cohort
COHORT_RANGES = {
    "Gb": (90.0, 140.0),
    "Ib": (8.0, 15.0),
    "p1": (0.02, 0.04),
    "p2": (0.015, 0.03),
    "p3": (1.0e-5, 3.0e-5),
    "n_clr": (0.10, 0.20),
    "V_g": (100.0, 140.0),
    "V_i": (10.0, 14.0),
    "t_max_meal": (30.0, 60.0),
    "A_g": (0.7, 0.9),
    "dawn_amp": (0.0, 30.0),
}


@dataclass(frozen=True)
class Jitter:
    meal_time_min: float = 20.0     # sd of meal clock time
    carbs_frac: float = 0.2         # sd of relative carb amount
    bolus_error_frac: float = 0.3  # sd of carb-counting error used for the bolus
    bolus_offset_min: float = 15.0  # sd of bolus timing relative to the meal
    missed_bolus_prob: float = 0.05
    exercise_time_min: float = 30.0
    exercise_intensity_frac: float = 0.2
    sleep_h: float = 1.0            # sd of bedtime and wake time


@dataclass(frozen=True)
class Scenario:
    days: int = 14
    meals: tuple[tuple[float, float], ...] = ((8.0, 60.0), (13.5, 80.0), (17.0, 20.0), (20.5, 70.0))
    carb_ratio: float = 10.0          # g/U
    correction_factor: float = 40.0   # mg/dL per U
    target: float = 120.0             # mg/dL
    correction_threshold: float = 230.0
    basal_rate: float = 1.0           # U/h; the infusion that holds I at Ib
    exercise_sessions: tuple[tuple[float, float, float], ...] = ((18.0, 45.0, 0.6),)
    exercise_prob: float = 0.5
    sleep_window: tuple[float, float] = (23.0, 7.0)
    jitter: Jitter = field(default_factory=Jitter)
    gap_rate_per_day: float = 0.5
    gap_minutes: tuple[float, float] = (20.0, 60.0)
    start: int = EPOCH_2021_03_01

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if any(c < 0 for _, c in self.meals):
            raise ValueError("meal carbs must be non-negative")
        if any(not 0 <= i <= 1 for _, _, i in self.exercise_sessions):
            raise ValueError("exercise intensity must lie in [0, 1]")
        if self.carb_ratio <= 0 or self.correction_factor <= 0:
            raise ValueError("carb ratio and correction factor must be positive")

    @classmethod
    def basal_only(cls, days: int = 1, **kw) -> "Scenario":
        """No meals, boluses, exercise, dropouts or jitter."""
        kw.setdefault("gap_rate_per_day", 0.0)
        return cls(days=days, meals=(), exercise_sessions=(), jitter=Jitter(0, 0, 0, 0, 0, 0, 0, 0), **kw)


@dataclass(frozen=True)
class SimState:
    G: float
    X: float
    I: float
    Q1: float = 0.0
    Q2: float = 0.0

    @classmethod
    def equilibrium(cls, params: PatientParams) -> "SimState":
        return cls(params.Gb, 0.0, params.Ib, 0.0, 0.0)


@dataclass(frozen=True)
class SimInputs:
    insulin: float = 0.0   # U/min above basal
    carbs: float = 0.0     # g, impulse into the first gut compartment
    exercise: float = 0.0  # intensity in [0, 1]


def dawn_rate(params: PatientParams, clock_s: float) -> float:
    """Dawn-phenomenon glucose drive (mg/dL/min), a raised-cosine bump from 03:00 to 09:00.

    Scaled by ``p1`` so the quasi-steady glucose excess never exceeds
    ``dawn_amp``.
    """
    if params.dawn_amp == 0:
        return 0.0
    h = (clock_s % 86400) / 3600.0
    if not 3.0 <= h <= 9.0:
        return 0.0
    return params.p1 * params.dawn_amp * 0.5 * (1.0 - math.cos(2 * math.pi * (h - 3.0) / 6.0))


def rate_of_appearance(Q2: float, params: PatientParams) -> float:
    """Gut glucose appearance in mg/min."""
    return params.A_g * Q2 * 1000.0 / params.t_max_meal


def _rhs(y, p: PatientParams, u, ex, t_s, sens, dawn: bool):
    G, X, I, Q1, Q2 = y
    ra = p.A_g * Q2 * 1000.0 / p.t_max_meal
    d = dawn_rate(p, t_s) if dawn else 0.0
    dG = -p.p1 * (G - p.Gb) - (1.0 + 2.0 * ex) * X * G + ra / p.V_g + d
    dX = -p.p2 * X + p.p3 * sens * (I - p.Ib)
    dI = -p.n_clr * (I - p.Ib) + u * 1000.0 / p.V_i
    dQ1 = -Q1 / p.t_max_meal
    dQ2 = (Q1 - Q2) / p.t_max_meal
    return (dG, dX, dI, dQ1, dQ2)


def _rk4(y, p, u, ex, t_s, dt_s, sens=1.0, dawn=True):
    h = dt_s / 60.0
    half = dt_s / 2.0
    k1 = _rhs(y, p, u, ex, t_s, sens, dawn)
    k2 = _rhs(tuple(a + 0.5 * h * b for a, b in zip(y, k1)), p, u, ex, t_s + half, sens, dawn)
    k3 = _rhs(tuple(a + 0.5 * h * b for a, b in zip(y, k2)), p, u, ex, t_s + half, sens, dawn)
    k4 = _rhs(tuple(a + h * b for a, b in zip(y, k3)), p, u, ex, t_s + dt_s, sens, dawn)
    out = tuple(a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))
    G, X, I, Q1, Q2 = out
    clamped = G < G_FLOOR
    return (max(G, G_FLOOR), X, max(I, 0.0), max(Q1, 0.0), max(Q2, 0.0)), clamped


def step_ode(state: SimState, params: PatientParams, inputs: SimInputs = SimInputs(),
             dt_s: float = ODE_STEP_S, t_s: float = 0.0, sensitivity: float = 1.0,
             dawn: bool = True) -> SimState:
    """Advance the model by one RK4 step of ``dt_s`` seconds (at most 60).

    ``t_s`` is the clock time used by the dawn term. The carbs impulse is added
    to the first gut compartment at the start of the step.
    """
    vals = (state.G, state.X, state.I, state.Q1, state.Q2, inputs.insulin, inputs.carbs,
            inputs.exercise, dt_s, t_s)
    if any(math.isnan(v) for v in vals):
        raise ValueError("NaN in state or inputs")
    if t_s < 0 or not 0 < dt_s <= 60:
        raise ValueError("dt_s must lie in (0, 60] and t_s must be non-negative")
    y = (state.G, state.X, state.I, state.Q1 + inputs.carbs, state.Q2)
    out, _ = _rk4(y, params, inputs.insulin, inputs.exercise, t_s, dt_s, sensitivity, dawn)
    return SimState(*out)


def integrate(params: PatientParams, minutes: int, insulin=None, carbs=None, exercise=None,
              state: SimState | None = None, t0_s: float = 0.0, dawn: bool = True) -> np.ndarray:
    """Open-loop integration at one-minute steps.

    ``insulin`` (U/min), ``carbs`` (g impulses) and ``exercise`` are per-minute
    arrays. Returns an ``(minutes + 1, 5)`` array of ``G, X, I, Q1, Q2``.
    """
    zeros = np.zeros(minutes)
    insulin = zeros if insulin is None else np.asarray(insulin, float)
    carbs = zeros if carbs is None else np.asarray(carbs, float)
    exercise = zeros if exercise is None else np.asarray(exercise, float)
    s = state or SimState.equilibrium(params)
    y = (s.G, s.X, s.I, s.Q1, s.Q2)
    out = np.empty((minutes + 1, 5))
    out[0] = y
    for k in range(minutes):
        y = (y[0], y[1], y[2], y[3] + carbs[k], y[4])
        y, _ = _rk4(y, params, insulin[k], exercise[k], t0_s + 60.0 * k, 60.0, 1.0, dawn)
        out[k + 1] = y
    return out


# --------------------------------------------------------------------------- scenarios


@dataclass
class _DayPlan:
    meals: list      # (minute, carbs)
    boluses: list    # (minute, estimated carbs) or None for skipped
    exercise: list   # (start minute, duration min, intensity)
    sleep: tuple     # (start minute, end minute) relative to record start


def _plan_days(scenario: Scenario, rng: np.random.Generator) -> list[_DayPlan]:
    j = scenario.jitter
    plans = []
    for day in range(scenario.days):
        base = day * 1440
        meals, boluses = [], []
        for clock_h, carbs in scenario.meals:
            m = base + clock_h * 60 + rng.normal(0, j.meal_time_min) if j.meal_time_min else base + clock_h * 60
            c = max(0.0, carbs * (1 + rng.normal(0, j.carbs_frac))) if j.carbs_frac else carbs
            m = int(round(m))
            meals.append((m, round(c, 1)))
            est = max(0.0, c * (1 + rng.normal(0, j.bolus_error_frac))) if j.bolus_error_frac else c
            off = rng.normal(0, j.bolus_offset_min) if j.bolus_offset_min else 0.0
            if j.missed_bolus_prob and rng.random() < j.missed_bolus_prob:
                boluses.append(None)
            else:
                boluses.append((int(round(m + off)), est))
        ex = []
        for clock_h, dur, inten in scenario.exercise_sessions:
            if rng.random() < scenario.exercise_prob:
                m = base + clock_h * 60 + (rng.normal(0, j.exercise_time_min) if j.exercise_time_min else 0)
                i = inten * (1 + rng.normal(0, j.exercise_intensity_frac)) if j.exercise_intensity_frac else inten
                ex.append((int(round(m)), int(dur), float(np.clip(i, 0.0, 1.0))))
        s_h, e_h = scenario.sleep_window
        s_h = s_h + (rng.normal(0, j.sleep_h) if j.sleep_h else 0.0)
        e_h = e_h + (rng.normal(0, j.sleep_h / 2) if j.sleep_h else 0.0)
        start = base + s_h * 60
        end = base + 1440 + e_h * 60 if e_h <= s_h else base + e_h * 60
        plans.append(_DayPlan(meals, boluses, ex, (int(round(start)), int(round(end)))))
    return plans


def simulate_patient(params: PatientParams, scenario: Scenario, seed=0,
                     patient_id: str = "P000") -> PatientRecord:
    """Simulate one patient over ``scenario.days`` days.

    Meal boluses follow the scenario's carb ratio and correction factor using
    the (noisy, delayed) CGM reading at bolus time; correction boluses are given
    when the reading exceeds ``correction_threshold`` and no bolus was taken in
    the previous three hours.
    """
    rng = _seeds.rng(seed)
    n_min = scenario.days * 1440
    t0 = scenario.start
    plans = _plan_days(scenario, rng)

    carbs_in = np.zeros(n_min)
    bolus_plan: dict[int, float] = {}
    ex_min = np.zeros(n_min)
    asleep = np.zeros(n_min, dtype=bool)
    for plan in plans:
        for m, c in plan.meals:
            if 0 <= m < n_min:
                carbs_in[m] += c
        for b in plan.boluses:
            if b is not None and 0 <= b[0] < n_min:
                bolus_plan[b[0]] = bolus_plan.get(b[0], 0.0) + b[1]
        for m, dur, inten in plan.exercise:
            lo, hi = max(0, m), min(n_min, m + dur)
            ex_min[lo:hi] = np.maximum(ex_min[lo:hi], inten)
        lo, hi = plan.sleep
        asleep[max(0, lo):max(0, min(n_min, hi))] = True

    # insulin sensitivity multiplier from the previous night's sleep deficit
    sens = np.ones(n_min)
    for plan in plans:
        lo, hi = plan.sleep
        deficit = max(0.0, 7.0 - (hi - lo) / 60.0)
        if hi < n_min and deficit > 0:
            sens[hi:min(n_min, hi + 16 * 60)] = (1.0 + params.sleep_deficit_resistance) ** (-deficit)

    noise = rng.normal(0.0, params.cgm_noise_sd, size=n_min // 5 + 1) if params.cgm_noise_sd else \
        np.zeros(n_min // 5 + 1)
    delay = int(round(params.cgm_delay_min))
    G_hist = np.empty(n_min + 1)
    y = (params.Gb, 0.0, params.Ib, 0.0, 0.0)
    G_hist[0] = y[0]
    cgm_latest = params.Gb
    last_bolus = -10 ** 9
    bolus_events: dict[int, float] = {}
    clamps = 0
    for k in range(n_min):
        if k % 5 == 0:
            cgm_latest = G_hist[max(0, k - delay)] + noise[k // 5]
        u = 0.0
        dose = 0.0
        if k in bolus_plan:
            corr = max(0.0, (cgm_latest - scenario.target) / scenario.correction_factor)
            dose = bolus_plan[k] / scenario.carb_ratio + corr
        elif k % 30 == 0 and cgm_latest > scenario.correction_threshold and k - last_bolus >= 180:
            dose = (cgm_latest - scenario.target) / scenario.correction_factor
        dose = round(dose, 1)
        if dose > 0:
            bolus_events[k] = bolus_events.get(k, 0.0) + dose
            last_bolus = k
            u = dose  # delivered within one minute
        y = (y[0], y[1], y[2], y[3] + carbs_in[k], y[4])
        y, clamped = _rk4(y, params, u, ex_min[k], t0 + 60.0 * k, 60.0, sens[k])
        clamps += clamped
        G_hist[k + 1] = y[0]
    if clamps:
        log.warning("%s: glucose clamped at %.0f mg/dL in %d steps", patient_id, G_FLOOR, clamps)

    n_slots = n_min * 60 // BASE_STEP_S
    per = BASE_STEP_S // 60
    slot_min = np.arange(n_slots) * per
    cgm = G_hist[np.maximum(0, slot_min - delay)] + noise[:n_slots]
    for _ in range(rng.poisson(scenario.gap_rate_per_day * scenario.days)):
        first = rng.integers(0, n_slots)
        length = int(round(rng.uniform(*scenario.gap_minutes) / per))
        cgm[first:first + length] = np.nan

    hour = ((t0 + slot_min * 60) % 86400) / 3600.0
    ex_slot = ex_min[: n_slots * per].reshape(n_slots, per).mean(axis=1)
    hr = 60.0 + 55.0 * ex_slot + 5.0 * np.sin(2 * np.pi * (hour - 10.0) / 24.0) \
        + rng.normal(0.0, 3.0, size=n_slots)

    def events(var, d):
        keys = sorted(k for k, v in d.items() if v > 0)
        return EventSeries(var, [t0 + 60 * k for k in keys], [d[k] for k in keys])

    meal_events = {}
    for m in np.flatnonzero(carbs_in):
        meal_events[int(m)] = float(carbs_in[m])

    series = {
        Variable.GLUCOSE: UniformSeries(Variable.GLUCOSE, t0, BASE_STEP_S, cgm),
        Variable.INSULIN_BOLUS: events(Variable.INSULIN_BOLUS, bolus_events),
        Variable.CARBS: events(Variable.CARBS, meal_events),
        Variable.EXERCISE: UniformSeries(Variable.EXERCISE, t0, BASE_STEP_S, ex_slot),
        Variable.HEART_RATE: UniformSeries(Variable.HEART_RATE, t0, BASE_STEP_S, hr),
        Variable.SLEEP: UniformSeries(Variable.SLEEP, t0, BASE_STEP_S, asleep[slot_min].astype(float)),
        Variable.SCHEDULE: UniformSeries(Variable.SCHEDULE, t0, BASE_STEP_S, hour),
    }
    return PatientRecord(patient_id, (t0, t0 + n_min * 60), series)


def default_cohort(n: int, seed=0) -> list[PatientParams]:
    """``n`` parameter sets drawn uniformly within :data:`COHORT_RANGES`."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _seeds.rng(seed, 0xC040)
    out = []
    for _ in range(n):
        draw = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in COHORT_RANGES.items()}
        out.append(PatientParams(**draw))
    return out


def simulate_cohort(n: int, days: int = 14, seed=0, scenario: Scenario | None = None) -> list[PatientRecord]:
    scenario = replace(scenario or Scenario(), days=days)
    return [simulate_patient(p, scenario, _seeds.seed_sequence(seed, i), patient_id=f"P{i:03d}")
            for i, p in enumerate(default_cohort(n, seed))]


def export(record: PatientRecord, path) -> None:
    write_csv(record, path)


def import_record(path) -> PatientRecord:
    return read_csv(path)


# --------------------------------------------------------------------------- scenario files

_SCENARIO_SCALARS = {f.name for f in fields(Scenario)} - {"meals", "exercise_sessions", "sleep_window",
                                                         "jitter", "gap_minutes"}
_JITTER_KEYS = {f.name for f in fields(Jitter)}


def _clock(text: str) -> float:
    if ":" in text:
        h, m = text.split(":")
        return int(h) + int(m) / 60.0
    return float(text)


def parse_scenario(text: str) -> Scenario:
    """Parse a key-value scenario description.

    One ``key = value`` per line, ``#`` starts a comment. Keys: the scalar
    :class:`Scenario` fields (``days``, ``carb_ratio``, ...), ``meals``
    (``08:00 50, 13:30 70``), ``exercise`` (``18:00 45 0.6, ...``),
    ``sleep_window`` (``23:00 07:00``), ``gap_minutes`` (``20 60``) and
    ``jitter.<field>``.
    """
    kw: dict = {}
    jitter: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "meals":
                kw["meals"] = tuple((_clock(a), float(b)) for a, b in
                                    (item.split() for item in value.split(",") if item.strip()))
            elif key == "exercise":
                kw["exercise_sessions"] = tuple((_clock(a), float(b), float(c)) for a, b, c in
                                                (item.split() for item in value.split(",") if item.strip()))
            elif key == "sleep_window":
                a, b = value.split()
                kw["sleep_window"] = (_clock(a), _clock(b))
            elif key == "gap_minutes":
                a, b = value.split()
                kw["gap_minutes"] = (float(a), float(b))
            elif key.startswith("jitter.") and key[7:] in _JITTER_KEYS:
                jitter[key[7:]] = float(value)
            elif key in _SCENARIO_SCALARS:
                kw[key] = int(value) if key in ("days", "start") else float(value)
            else:
                raise ValueError(f"unknown scenario key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if jitter:
        kw["jitter"] = Jitter(**jitter)
    return Scenario(**kw)


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def params_to_dict(p: PatientParams) -> dict:
    return asdict(p)
