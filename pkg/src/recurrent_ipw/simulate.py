"""Trial simulator: recurrent events with treatment switching.

Time runs on a weekly grid. Draw week d (0-based) covers the interval
(d/52, (d+1)/52] years: the time-varying covariate L is measured at the
start of the week (index d), the week's event draw happens next, and the
switch draw comes last, taking effect at the end of the week. Event times
are recorded at week midpoints, (d + 0.5)/52 years, and a switch in draw
week d happens at (d + 1)/52 years, so same-week events precede the switch.

Each trial materializes two covariate paths per subject from shared noise:
the observed path L(t), where placebo responders start declining at their
switch week, and the counterfactual no-switching path L*(t). Event draws in
the two worlds share week-level uniforms, so the processes differ only
where the covariate paths (or accumulated event histories) differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Subject, TVSeries, complete_weeks

RESPONDER_PROB = 0.8
RESPONDER_FLOOR = 15.0
RESPONDER_SLOPE = 0.14
TRAJECTORY_SD = 1.0


@dataclass(frozen=True)
class ScenarioParams:
    """Coefficients of the switching and event mechanisms.

    All vectors follow the column order (intercept, arm, prior_history,
    sex, age, L). Scenario 1 events are memoryless, scenario 2 adds
    ``history_coef`` to the logit from the first event onward (an
    ever-event indicator, not a count), and scenario 3 multiplies the
    event probability by a per-subject gamma frailty with mean 1 and
    variance ``frailty_var``, capped at 1.
    """

    scenario: int = 1
    beta_s: tuple = (-13.76, -0.4, 0.8, 0.4, 0.016, 0.264)
    beta_e1: tuple = (-5.6, -0.07, 0.07, 0.035, 0.0035, 0.028)
    beta_e2: tuple = (-5.74, -0.07, 0.07, 0.035, 0.0035, 0.028)
    beta_e3: tuple = (-5.46, -0.105, 0.07, 0.035, 0.0035, 0.028)
    history_coef: float = 0.7
    frailty_var: float = 0.5

    def __post_init__(self) -> None:
        if self.scenario not in (1, 2, 3):
            raise ValueError("scenario must be 1, 2, or 3")
        for name in ("beta_s", "beta_e1", "beta_e2", "beta_e3"):
            if len(getattr(self, name)) != 6:
                raise ValueError(f"{name} must have 6 entries")
        if self.scenario == 3 and self.frailty_var <= 0:
            raise ValueError("frailty variance must be positive in scenario 3")

    @property
    def beta_e(self) -> np.ndarray:
        return np.asarray(
            {1: self.beta_e1, 2: self.beta_e2, 3: self.beta_e3}[self.scenario]
        )


SCENARIOS = {k: ScenarioParams(scenario=k) for k in (1, 2, 3)}


@dataclass
class SimConfig:
    """Trial design constants."""

    n_subjects: int = 2000
    trial_years: float = 4.0
    enrollment_years: float = 2.0
    ltfu_rate: float = 0.032
    measurement_interval: int = 1
    scenario: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 2 or self.n_subjects % 2 != 0:
            raise ValueError("n_subjects must be even for 1:1 allocation")
        if self.measurement_interval not in (1, 12):
            raise ValueError("measurement_interval must be 1 or 12 weeks")
        if self.scenario not in (1, 2, 3):
            raise ValueError("scenario must be 1, 2, or 3")
        if self.trial_years <= self.enrollment_years or self.enrollment_years < 0:
            raise ValueError("need 0 <= enrollment_years < trial_years")
        if self.ltfu_rate < 0:
            raise ValueError("ltfu_rate cannot be negative")


@dataclass
class SimOutput:
    """Observed and counterfactual subject lists from one simulated trial.

    ``observed`` subjects carry their counterfactual event times and
    covariate path in the cf_* fields; ``hypothetical`` repackages the
    counterfactual world as standalone subjects without switching.
    """

    observed: List[Subject]
    hypothetical: List[Subject]
    config: SimConfig


def _linpred(beta: np.ndarray, arm, prior_history, sex, age, tv_value):
    """Linear predictor over (1, arm, prior_history, sex, age, L)."""
    b = np.asarray(beta, dtype=np.float64)
    return (
        b[0]
        + b[1] * arm
        + b[2] * prior_history
        + b[3] * sex
        + b[4] * age
        + b[5] * tv_value
    )


def _event_prob(params: ScenarioParams, lin, n_prior, frailty):
    if params.scenario == 2:
        return expit(lin + params.history_coef * (np.asarray(n_prior) > 0))
    if params.scenario == 3:
        return np.minimum(1.0, frailty * expit(lin))
    return expit(lin)


def _trajectory_mean(arm, responder, l0, switch_week, week):
    """Mean of L at a week index; switch_week is NaN when absent.

    Treated responders decline from week 0; placebo responders decline
    from their switch week; everyone else stays at the baseline level.
    Arguments broadcast, so this serves both one subject over many weeks
    and many subjects at one week.
    """
    arm = np.asarray(arm)
    responder = np.asarray(responder, dtype=bool)
    l0 = np.asarray(l0, dtype=np.float64)
    ts = np.asarray(switch_week, dtype=np.float64)
    week = np.asarray(week, dtype=np.float64)
    mean = np.broadcast_arrays(l0, ts, week, arm)[0].copy()
    treated = (arm == 1) & responder
    mean = np.where(
        treated, np.maximum(RESPONDER_FLOOR, l0 - RESPONDER_SLOPE * week), mean
    )
    with np.errstate(invalid="ignore"):
        switched = (arm == 0) & responder & ~np.isnan(ts) & (week >= ts)
        post = np.maximum(RESPONDER_FLOOR, l0 - RESPONDER_SLOPE * (week - ts))
    mean = np.where(switched, post, mean)
    return mean


def _baseline_tv_value(subject: Subject) -> float:
    tv = subject.tv_series
    if tv is None or tv.weeks[0] != 0:
        raise ValueError(f"subject {subject.id} lacks a baseline (week 0) measurement")
    return float(tv.values[0])


def _require_dense_through(tv: TVSeries, week: int, subject_id: str) -> None:
    if not tv.is_dense() or tv.last_week < week:
        raise ValueError(
            f"subject {subject_id}: need a dense weekly trajectory through week {week}"
        )


def gen_baseline(config: SimConfig, rng: np.random.Generator) -> List[Subject]:
    """Draw covariates and follow-up for a fresh cohort.

    Arms are a random permutation of an exact 1:1 split. Follow-up is the
    minimum of the administrative censor time (trial end minus uniform
    enrollment) and an exponential loss-to-follow-up time. The baseline L
    measurement is stored as a single-point series at week 0.
    """
    n = config.n_subjects
    arm = rng.permutation(np.repeat(np.array([0, 1]), n // 2))
    sex = (rng.random(n) < 0.5).astype(np.int64)
    age = rng.uniform(50.0, 65.0, n)
    l0 = rng.normal(18.0, 5.0, n)
    prior = (rng.random(n) < np.where(l0 > 16.0, 0.1, 0.05)).astype(np.int64)
    enroll = rng.uniform(0.0, config.enrollment_years, n)
    admin = config.trial_years - enroll
    if config.ltfu_rate > 0:
        tau = np.minimum(admin, rng.exponential(1.0 / config.ltfu_rate, n))
    else:
        tau = admin
    width = len(str(n))
    out = []
    for i in range(n):
        out.append(
            Subject(
                id=f"S{i + 1:0{width}d}",
                arm=int(arm[i]),
                sex=int(sex[i]),
                age=float(age[i]),
                prior_history=int(prior[i]),
                enroll_time=float(enroll[i]),
                tau=float(tau[i]),
                event_times=np.zeros(0),
                switch_time=None,
                tv_series=TVSeries(
                    np.array([0]), np.array([l0[i]]), config.measurement_interval
                ),
            )
        )
    return out


def gen_tv_trajectory(
    subject: Subject,
    switch_week: Optional[int],
    rng: np.random.Generator,
    responder: Optional[bool] = None,
    noise: Optional[np.ndarray] = None,
    n_weeks: Optional[int] = None,
) -> TVSeries:
    """Weekly covariate path for one subject, weeks 0 through ``n_weeks``.

    ``switch_week`` is the 0-based draw week of the switch (None when the
    subject never switches); it shifts only placebo responders onto the
    declining path. Responder status and the unit-variance noise are drawn
    here unless supplied, which lets a caller share them across the
    observed and counterfactual worlds.
    """
    l0 = _baseline_tv_value(subject)
    if n_weeks is None:
        n_weeks = complete_weeks(subject.tau)
    if responder is None:
        responder = bool(l0 >= RESPONDER_FLOOR and rng.random() < RESPONDER_PROB)
    if noise is None:
        noise = TRAJECTORY_SD * rng.standard_normal(n_weeks + 1)
    if len(noise) < n_weeks + 1:
        raise ValueError("noise must cover weeks 0 through n_weeks")
    weeks = np.arange(n_weeks + 1)
    ts = np.nan if switch_week is None else float(switch_week)
    mean = _trajectory_mean(subject.arm, responder, l0, ts, weeks)
    return TVSeries(weeks, mean + noise[: n_weeks + 1], 1)


def gen_switching(
    subject: Subject,
    tv: TVSeries,
    params: ScenarioParams,
    rng: np.random.Generator,
    uniforms: Optional[np.ndarray] = None,
) -> Optional[int]:
    """First draw week whose Bernoulli switching draw succeeds, else None.

    Week d is at risk when the subject's follow-up covers it completely;
    the week-d hazard uses the week-d covariate value.
    """
    n_weeks = complete_weeks(subject.tau)
    if n_weeks == 0:
        return None
    _require_dense_through(tv, n_weeks - 1, subject.id)
    for d in range(n_weeks):
        p = expit(
            _linpred(
                params.beta_s,
                subject.arm,
                subject.prior_history,
                subject.sex,
                subject.age,
                tv.values[d],
            )
        )
        u = rng.random() if uniforms is None else uniforms[d]
        if u < p:
            return d
    return None


def gen_events(
    subject: Subject,
    tv: TVSeries,
    params: ScenarioParams,
    rng: np.random.Generator,
    uniforms: Optional[np.ndarray] = None,
    frailty: Optional[float] = None,
) -> np.ndarray:
    """0-based draw weeks with an event, following the scenario mechanism.

    Scenario 2 raises the weekly probability once this call has produced
    its first event; scenario 3 draws the subject's frailty here when not
    supplied.
    """
    n_weeks = complete_weeks(subject.tau)
    if params.scenario == 3 and frailty is None:
        frailty = float(
            rng.gamma(1.0 / params.frailty_var, params.frailty_var)
        )
    if n_weeks == 0:
        return np.zeros(0, dtype=np.int64)
    _require_dense_through(tv, n_weeks - 1, subject.id)
    beta_e = params.beta_e
    weeks = []
    for d in range(n_weeks):
        lin = _linpred(
            beta_e,
            subject.arm,
            subject.prior_history,
            subject.sex,
            subject.age,
            tv.values[d],
        )
        q = _event_prob(params, lin, len(weeks), frailty)
        u = rng.random() if uniforms is None else uniforms[d]
        if u < q:
            weeks.append(d)
    return np.asarray(weeks, dtype=np.int64)


def simulate_trial(config: SimConfig, seed=None) -> SimOutput:
    """Simulate one trial and its counterfactual no-switching twin.

    The random stream is consumed in a fixed order: baseline covariates,
    responder flags, trajectory noise, frailties (scenario 3), switch
    uniforms, then event uniforms, each as one block over all subjects.
    Both worlds are then deterministic. The stored covariate series keeps
    every ``measurement_interval``-th week of the realized path.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = SCENARIOS[config.scenario]
    base = gen_baseline(config, rng)
    n = len(base)
    arm = np.array([s.arm for s in base])
    sex = np.array([s.sex for s in base])
    age = np.array([s.age for s in base])
    prior = np.array([s.prior_history for s in base])
    l0 = np.array([_baseline_tv_value(s) for s in base])
    n_weeks = np.array([complete_weeks(s.tau) for s in base])

    responder = (l0 >= RESPONDER_FLOOR) & (rng.random(n) < RESPONDER_PROB)
    total_weeks = int(np.ceil(52 * config.trial_years))
    eps = TRAJECTORY_SD * rng.standard_normal((n, total_weeks + 1))
    if config.scenario == 3:
        frailty = rng.gamma(1.0 / params.frailty_var, params.frailty_var, n)
    else:
        frailty = np.ones(n)
    u_switch = rng.random((n, total_weeks))
    u_event = rng.random((n, total_weeks))

    beta_e = params.beta_e
    no_switch = np.full(n, np.nan)
    switch_week = np.full(n, np.nan)
    ev_obs = np.zeros((n, total_weeks), dtype=bool)
    ev_hyp = np.zeros((n, total_weeks), dtype=bool)
    count_obs = np.zeros(n)
    count_hyp = np.zeros(n)
    l_obs = np.zeros((n, total_weeks + 1))
    l_hyp = np.zeros((n, total_weeks + 1))
    last = int(n_weeks.max()) if n else 0
    for d in range(last):
        at_risk = d < n_weeks
        value_obs = _trajectory_mean(arm, responder, l0, switch_week, d) + eps[:, d]
        value_hyp = _trajectory_mean(arm, responder, l0, no_switch, d) + eps[:, d]
        l_obs[:, d] = value_obs
        l_hyp[:, d] = value_hyp
        lin = _linpred(beta_e, arm, prior, sex, age, value_obs)
        hit = at_risk & (u_event[:, d] < _event_prob(params, lin, count_obs, frailty))
        ev_obs[:, d] = hit
        count_obs += hit
        lin = _linpred(beta_e, arm, prior, sex, age, value_hyp)
        hit = at_risk & (u_event[:, d] < _event_prob(params, lin, count_hyp, frailty))
        ev_hyp[:, d] = hit
        count_hyp += hit
        p_switch = expit(_linpred(params.beta_s, arm, prior, sex, age, value_obs))
        new = at_risk & np.isnan(switch_week) & (u_switch[:, d] < p_switch)
        switch_week[new] = d
    tail = np.arange(last, total_weeks + 1)
    if len(tail):
        l_obs[:, tail] = (
            _trajectory_mean(
                arm[:, None], responder[:, None], l0[:, None],
                switch_week[:, None], tail[None, :],
            )
            + eps[:, tail]
        )
        l_hyp[:, tail] = (
            _trajectory_mean(
                arm[:, None], responder[:, None], l0[:, None], np.nan, tail[None, :]
            )
            + eps[:, tail]
        )

    observed = []
    hypothetical = []
    interval = config.measurement_interval
    for i, sub in enumerate(base):
        w = int(n_weeks[i])
        meas = np.arange(0, w + 1, interval)
        tv_obs = TVSeries(meas, l_obs[i, meas], interval)
        tv_hyp = TVSeries(meas, l_hyp[i, meas], interval)
        t_obs = (np.nonzero(ev_obs[i, :w])[0] + 0.5) / 52.0
        t_hyp = (np.nonzero(ev_hyp[i, :w])[0] + 0.5) / 52.0
        s_time = None if np.isnan(switch_week[i]) else (switch_week[i] + 1.0) / 52.0
        obs = Subject(
            id=sub.id,
            arm=sub.arm,
            sex=sub.sex,
            age=sub.age,
            prior_history=sub.prior_history,
            enroll_time=sub.enroll_time,
            tau=sub.tau,
            event_times=t_obs,
            switch_time=s_time,
            tv_series=tv_obs,
            cf_event_times=t_hyp,
            cf_tv_series=tv_hyp,
        )
        obs.validate()
        observed.append(obs)
        hyp = Subject(
            id=sub.id,
            arm=sub.arm,
            sex=sub.sex,
            age=sub.age,
            prior_history=sub.prior_history,
            enroll_time=sub.enroll_time,
            tau=sub.tau,
            event_times=t_hyp,
            switch_time=None,
            tv_series=tv_hyp,
        )
        hyp.validate()
        hypothetical.append(hyp)
    return SimOutput(observed=observed, hypothetical=hypothetical, config=config)
