"""Trial data containers, counting-process expansion, LOCF imputation, summaries.

Follow-up is measured in years; the biomarker L(t) is measured on a weekly
grid with 52 weeks per year. A subject's follow-up splits into complete
draw-weeks 1..floor(52*tau) plus a final partial week.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

WEEKS_PER_YEAR = 52

# Guard for k/52 round trips: 52*(10/52) can land a hair below 10.0.
_WEEK_EPS = 1e-9


def complete_weeks(t: float) -> int:
    """Number of complete weeks contained in t years."""
    return int(math.floor(WEEKS_PER_YEAR * t + _WEEK_EPS))


def week_of(t: float) -> int:
    """Index of the week containing time t, where week w covers ((w-1)/52, w/52]."""
    return int(math.ceil(WEEKS_PER_YEAR * t - _WEEK_EPS))


class PositivityError(ValueError):
    """Raised when an estimated stay-uncensored probability underflows."""


@dataclass
class TVSeries:
    """Weekly biomarker values, possibly sparse until LOCF imputation.

    weeks holds increasing week indices; values the measurements at those
    weeks. measurement_interval records the visit spacing in weeks.
    """

    weeks: np.ndarray
    values: np.ndarray
    measurement_interval: int = 1

    def __post_init__(self):
        self.weeks = np.asarray(self.weeks, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.weeks.ndim != 1 or self.weeks.shape != self.values.shape:
            raise ValueError("weeks and values must be 1-d arrays of equal length")
        if self.weeks.size:
            if self.weeks[0] < 0 or np.any(np.diff(self.weeks) <= 0):
                raise ValueError("week indices must be non-negative and strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("biomarker values must be finite")
        if self.measurement_interval < 1:
            raise ValueError("measurement_interval must be a positive number of weeks")

    def __eq__(self, other):
        if not isinstance(other, TVSeries):
            return NotImplemented
        return (
            self.measurement_interval == other.measurement_interval
            and np.array_equal(self.weeks, other.weeks)
            and np.array_equal(self.values, other.values)
        )

    @property
    def last_week(self) -> int:
        return int(self.weeks[-1]) if self.weeks.size else -1

    def is_dense(self) -> bool:
        """True when weeks run 0, 1, ..., last_week without gaps."""
        return self.weeks.size > 0 and self.weeks[0] == 0 and np.array_equal(
            self.weeks, np.arange(self.weeks.size)
        )

    def value_at(self, week: int) -> float:
        """Value at an exact measured week of a dense series."""
        if not self.is_dense():
            raise ValueError("value_at requires a dense (imputed) series")
        if week < 0 or week > self.last_week:
            raise ValueError(f"week {week} outside series range 0..{self.last_week}")
        return float(self.values[week])


def locf_impute(series: TVSeries, through_week: Optional[int] = None) -> TVSeries:
    """Carry each measurement forward to every week up to through_week.

    through_week defaults to the last measured week. Measured weeks keep
    their values; a missing week-0 measurement is an error because nothing
    can be carried into it.
    """
    if series.weeks.size == 0 or series.weeks[0] != 0:
        raise ValueError("LOCF imputation requires a week-0 measurement")
    if through_week is None:
        through_week = series.last_week
    if through_week < series.last_week:
        raise ValueError("through_week precedes the last measured week")
    weeks = np.arange(through_week + 1)
    pos = np.searchsorted(series.weeks, weeks, side="right") - 1
    return TVSeries(weeks, series.values[pos], series.measurement_interval)


@dataclass
class Subject:
    """One trial participant with recurrent events and optional switching.

    Simulated subjects additionally carry the counterfactual no-switch world
    (cf_event_times, cf_tv_series); ingested subjects leave those None.
    """

    id: object
    arm: int
    sex: int
    age: float
    prior_history: int
    enroll_time: float
    tau: float
    event_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    switch_time: Optional[float] = None
    tv_series: Optional[TVSeries] = None
    cf_event_times: Optional[np.ndarray] = None
    cf_tv_series: Optional[TVSeries] = None

    def __post_init__(self):
        self.event_times = np.asarray(self.event_times, dtype=np.float64)
        if self.cf_event_times is not None:
            self.cf_event_times = np.asarray(self.cf_event_times, dtype=np.float64)

    def validate(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"subject {self.id}: tau must be positive and finite")
        if self.arm not in (0, 1) or self.sex not in (0, 1) or self.prior_history not in (0, 1):
            raise ValueError(f"subject {self.id}: arm, sex, prior_history must be 0/1")
        ev = self.event_times
        if ev.size:
            if np.any(ev <= 0) or np.any(ev > self.tau):
                raise ValueError(f"subject {self.id}: event times must lie in (0, tau]")
            if np.any(np.diff(ev) <= 0):
                raise ValueError(f"subject {self.id}: event times must be strictly increasing")
        if self.switch_time is not None:
            if not (0 < self.switch_time <= self.tau):
                raise ValueError(f"subject {self.id}: switch_time must lie in (0, tau]")

    @property
    def covariates(self) -> np.ndarray:
        """Fixed covariate vector (arm, sex, age, prior_history)."""
        return np.array(
            [self.arm, self.sex, self.age, self.prior_history], dtype=np.float64
        )

    def followup_end(self, censor_at_switch: bool) -> float:
        if censor_at_switch and self.switch_time is not None:
            return min(self.tau, self.switch_time)
        return self.tau

    def observed_events(self, censor_at_switch: bool) -> np.ndarray:
        """Event times retained under the chosen censoring rule.

        Under switch-censoring an event at exactly t = S is dropped; an
        event at exactly t = tau is kept.
        """
        end = self.followup_end(censor_at_switch)
        ev = self.event_times
        if censor_at_switch and self.switch_time is not None:
            return ev[ev < end]
        return ev[ev <= end]


COVARIATE_NAMES = ("arm", "sex", "age", "prior_history")


@dataclass(slots=True)
class CountingProcessRow:
    """One at-risk interval (start, stop] with an event flag at stop."""

    id: object
    start: float
    stop: float
    status: int
    covariates: tuple
    weight: float = 1.0


def _weight_lookup(values: np.ndarray, week: int) -> float:
    """Weekly weight step function: week k maps to the k-th stored value
    (weeks 1..K), with week <= 0 giving 1.0 and weeks past the end clamped."""
    if week <= 0 or values.size == 0:
        return 1.0
    return float(values[min(week, values.size) - 1])


def expand_counting_process(
    subjects: Sequence[Subject],
    censor_at_switch: bool,
    weights: Optional[Mapping[object, "object"]] = None,
    validate: bool = True,
) -> list[CountingProcessRow]:
    """Split each subject's follow-up into rows at its event times.

    With censoring on, follow-up ends at min(tau, S) and events at t >= S are
    discarded; with censoring off it ends at tau. Row weights come from the
    supplied weekly weight series evaluated at floor(52*stop), clamped to the
    last covered week; absent weights every row gets 1.0.
    """
    rows: list[CountingProcessRow] = []
    for subj in subjects:
        if validate:
            subj.validate()
        series_values = None
        if weights is not None:
            if subj.id not in weights:
                raise ValueError(f"subject {subj.id}: no weight series supplied")
            series_values = np.asarray(weights[subj.id].values, dtype=np.float64)
            if series_values.size and np.any(series_values <= 0):
                raise ValueError(f"subject {subj.id}: weights must be positive")
        end = subj.followup_end(censor_at_switch)
        kept = subj.observed_events(censor_at_switch)
        cov = tuple(subj.covariates)
        bounds = list(kept)
        if not bounds or bounds[-1] < end:
            bounds.append(end)
            statuses = [1] * len(kept) + [0]
        else:
            statuses = [1] * len(kept)
        start = 0.0
        for stop, status in zip(bounds, statuses):
            w = 1.0
            if series_values is not None:
                w = _weight_lookup(series_values, complete_weeks(stop))
            rows.append(CountingProcessRow(subj.id, start, stop, status, cov, w))
            start = stop
    return rows


@dataclass
class ArmSummary:
    arm: int
    n_subjects: int
    total_events: int
    mean_followup_years: float
    event_rate_per_year: float
    mean_events_per_subject: float
    pct_switchers: float


@dataclass
class DatasetSummary:
    mode: str
    arms: tuple

    def arm(self, which: int) -> ArmSummary:
        for a in self.arms:
            if a.arm == which:
                return a
        raise KeyError(which)


SUMMARY_MODES = ("hypothetical", "treatment_policy", "simple_censoring")


def summarize(subjects: Sequence[Subject], mode: str) -> DatasetSummary:
    """Per-arm dataset statistics under one follow-up/event definition.

    treatment_policy counts all events to tau; simple_censoring truncates
    events and follow-up at the switch; hypothetical reads the simulated
    counterfactual world and requires it to be present.
    """
    if mode not in SUMMARY_MODES:
        raise ValueError(f"unknown summary mode {mode!r}")
    if mode == "hypothetical":
        for s in subjects:
            if s.cf_event_times is None:
                raise ValueError(
                    f"subject {s.id}: hypothetical summary requires counterfactual data"
                )
    arms = []
    for arm in (0, 1):
        group = [s for s in subjects if s.arm == arm]
        n = len(group)
        if n == 0:
            arms.append(ArmSummary(arm, 0, 0, 0.0, 0.0, 0.0, 0.0))
            continue
        if mode == "hypothetical":
            events = sum(int(s.cf_event_times.size) for s in group)
            followup = sum(s.tau for s in group)
        elif mode == "treatment_policy":
            events = sum(int(s.event_times.size) for s in group)
            followup = sum(s.tau for s in group)
        else:
            events = sum(int(s.observed_events(True).size) for s in group)
            followup = sum(s.followup_end(True) for s in group)
        n_switch = sum(1 for s in group if s.switch_time is not None)
        arms.append(
            ArmSummary(
                arm=arm,
                n_subjects=n,
                total_events=events,
                mean_followup_years=followup / n,
                event_rate_per_year=events / followup if followup > 0 else 0.0,
                mean_events_per_subject=events / n,
                pct_switchers=100.0 * n_switch / n,
            )
        )
    return DatasetSummary(mode, tuple(arms))
