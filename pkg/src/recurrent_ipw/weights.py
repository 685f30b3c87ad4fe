"""Inverse probability of switching weights.

Switching is modeled on a discrete weekly grid: each subject contributes one
person-period record per complete week on study until the week they switch
(inclusive) or administrative follow-up ends. A pooled logistic regression on
these records gives weekly switching hazards, and weights are inverse
cumulative probabilities of remaining unswitched. The record for week w uses
covariates measured at the start of that week, i.e. the week w-1 measurement
of the time-varying covariate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import PositivityError, Subject, complete_weeks, week_of

BASELINE_COVARIATES = ("arm", "sex", "age", "prior_history")
DENOMINATOR_COVARIATES = BASELINE_COVARIATES + ("tv",)
POSITIVITY_FLOOR = 1e-12

_LOGIT_TOL = 1e-10
_LOGIT_MAX_ITER = 50
_LOGIT_RIDGE = 1e-8


@dataclass(frozen=True)
class PersonPeriodRecord:
    """One subject-week at risk of switching.

    ``week`` is 1-based; ``tv`` holds the time-varying covariate carried
    forward from the start of the week (the week ``week - 1`` measurement).
    ``event`` is 1 in the week the subject switches, else 0.
    """

    id: str
    week: int
    arm: int
    sex: int
    age: float
    prior_history: int
    tv: float
    event: int


@dataclass(eq=False)
class WeightSeries:
    """Weekly weights for one subject, covering weeks 1..K.

    ``values[k-1]`` is the weight applied to outcome rows whose stop time
    falls after k complete weeks, i.e. the inverse (stabilized) probability
    of remaining unswitched through week k. ``cum_num`` and ``cum_den`` keep
    the underlying cumulative stay probabilities for serialization.
    """

    id: str
    values: np.ndarray
    stabilized: bool
    cum_num: np.ndarray
    cum_den: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.cum_num = np.asarray(self.cum_num, dtype=np.float64)
        self.cum_den = np.asarray(self.cum_den, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("weight values must be a 1-d array")
        if len(self.cum_num) != len(self.values) or len(self.cum_den) != len(self.values):
            raise ValueError("cumulative probability arrays must match the weight length")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError(f"subject {self.id}: weights must be positive and finite")

    @property
    def n_weeks(self) -> int:
        return len(self.values)

    @classmethod
    def _trusted(cls, id, values, stabilized, cum_num, cum_den) -> "WeightSeries":
        """Constructor for internally validated arrays, skipping the checks."""
        obj = object.__new__(cls)
        obj.id = id
        obj.values = values
        obj.stabilized = stabilized
        obj.cum_num = cum_num
        obj.cum_den = cum_den
        return obj


@dataclass
class LogisticFit:
    """Pooled logistic regression result; ``coef[0]`` is the intercept."""

    coef: np.ndarray
    names: tuple
    converged: bool
    n_iterations: int
    loglik: float
    n_records: int
    n_switches: int


class _PersonPeriodMatrix:
    """Columnar person-period data for a subject list.

    Rows are ordered by subject (list order) and week. ``offsets`` gives the
    half-open row range of each subject, so per-subject slices are cheap.
    """

    __slots__ = ("ids", "subject_index", "week", "columns", "event", "offsets")

    def __init__(self, subjects: Sequence[Subject]):
        n_sub = len(subjects)
        counts = np.empty(n_sub, dtype=np.int64)
        switched = np.zeros(n_sub, dtype=bool)
        scalars = {name: np.empty(n_sub) for name in BASELINE_COVARIATES}
        tv_parts = []
        for i, sub in enumerate(subjects):
            n_weeks = complete_weeks(sub.tau)
            if sub.switch_time is not None:
                w_switch = week_of(sub.switch_time)
                if w_switch <= n_weeks:
                    n_weeks = w_switch
                    switched[i] = True
            counts[i] = n_weeks
            scalars["arm"][i] = sub.arm
            scalars["sex"][i] = sub.sex
            scalars["age"][i] = sub.age
            scalars["prior_history"][i] = sub.prior_history
            if n_weeks:
                tv_parts.append(_tv_prefix(sub, n_weeks))
        self.ids = [sub.id for sub in subjects]
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        total = int(self.offsets[-1])
        self.subject_index = np.repeat(np.arange(n_sub), counts)
        self.week = np.arange(1, total + 1) - np.repeat(self.offsets[:-1], counts)
        self.event = np.zeros(total)
        self.event[self.offsets[1:][switched] - 1] = 1.0
        self.columns = {name: np.repeat(scalars[name], counts) for name in BASELINE_COVARIATES}
        self.columns["tv"] = (
            np.concatenate(tv_parts) if tv_parts else np.zeros(0)
        )

    def design(self, covariates: Sequence[str]) -> np.ndarray:
        n = len(self.week)
        cols = [np.ones(n)]
        for name in covariates:
            if name not in self.columns:
                raise KeyError(f"unknown person-period covariate {name!r}")
            cols.append(self.columns[name])
        return np.column_stack(cols)


def _tv_at_weeks(subject: Subject, weeks: np.ndarray) -> np.ndarray:
    """Carry the last measurement at or before each requested week forward."""
    tv = subject.tv_series
    if tv is None:
        raise ValueError(f"subject {subject.id} has no time-varying covariate series")
    idx = np.searchsorted(tv.weeks, weeks, side="right") - 1
    if np.any(idx < 0):
        raise ValueError(
            f"subject {subject.id}: no measurement at or before week {int(weeks.min())}"
        )
    return tv.values[idx]


def _tv_prefix(subject: Subject, n: int) -> np.ndarray:
    """Carried-forward covariate at week starts 0..n-1.

    Weekly series measured from week 0 cover the request with a prefix slice
    (week indices are strictly increasing integers, so weeks[n-1] == n-1
    pins the first n entries to exactly 0..n-1); sparse series fall back to
    the general lookup.
    """
    tv = subject.tv_series
    if tv is not None and tv.weeks.size >= n and n and tv.weeks[0] == 0 and tv.weeks[n - 1] == n - 1:
        return tv.values[:n]
    return _tv_at_weeks(subject, np.arange(n))


def build_person_period(subjects: Sequence[Subject]) -> list:
    """Expand subjects into one PersonPeriodRecord per complete week at risk.

    A subject with W complete weeks of follow-up and no switch yields W
    records with event 0. A switcher in week w yields w records, the last
    with event 1. Subjects followed for under one week yield nothing.
    """
    mat = _PersonPeriodMatrix(subjects)
    records = []
    for r in range(len(mat.week)):
        sub = mat.ids[mat.subject_index[r]]
        records.append(
            PersonPeriodRecord(
                id=sub,
                week=int(mat.week[r]),
                arm=int(mat.columns["arm"][r]),
                sex=int(mat.columns["sex"][r]),
                age=float(mat.columns["age"][r]),
                prior_history=int(mat.columns["prior_history"][r]),
                tv=float(mat.columns["tv"][r]),
                event=int(mat.event[r]),
            )
        )
    return records


def _design_from_records(records: Sequence[PersonPeriodRecord], covariates: Sequence[str]):
    n = len(records)
    X = np.ones((n, 1 + len(covariates)))
    for j, name in enumerate(covariates):
        if name not in DENOMINATOR_COVARIATES:
            raise KeyError(f"unknown person-period covariate {name!r}")
        X[:, 1 + j] = [getattr(rec, name) for rec in records]
    y = np.array([rec.event for rec in records], dtype=np.float64)
    return X, y


def _fit_logistic_matrix(
    X: np.ndarray, y: np.ndarray, names: tuple, theta0: Optional[np.ndarray] = None
) -> LogisticFit:
    n_switches = int(y.sum())
    if len(y) == 0:
        raise ValueError("cannot fit a switching model without person-period records")
    if n_switches == 0:
        warnings.warn(
            "no switching events in the person-period data; weights are identically 1",
            stacklevel=3,
        )
        coef = np.zeros(X.shape[1])
        coef[0] = -np.inf
        return LogisticFit(coef, names, True, 0, 0.0, len(y), 0)
    if theta0 is not None and len(theta0) == X.shape[1] and np.all(np.isfinite(theta0)):
        theta = np.asarray(theta0, dtype=np.float64).copy()
    else:
        theta = np.zeros(X.shape[1])
        theta[0] = np.log(n_switches / (len(y) - n_switches)) if n_switches < len(y) else 0.0
    converged = False
    it = 0
    for it in range(1, _LOGIT_MAX_ITER + 1):
        eta = X @ theta
        p = expit(eta)
        grad = X.T @ (y - p)
        w = p * (1.0 - p)
        H = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            H[np.diag_indices_from(H)] += _LOGIT_RIDGE
            step = np.linalg.solve(H, grad)
        theta = theta + step
        if np.max(np.abs(step)) < _LOGIT_TOL:
            converged = True
            break
        if np.max(np.abs(theta)) > 1e3:
            break
    eta = X @ theta
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return LogisticFit(theta, names, converged, it, ll, len(y), n_switches)


def fit_pooled_logistic(
    records: Sequence[PersonPeriodRecord],
    covariates: Sequence[str] = DENOMINATOR_COVARIATES,
) -> LogisticFit:
    """Fit a weekly switching hazard model on person-period records.

    ``covariates`` names the non-intercept columns; an empty sequence fits
    an intercept-only model. When no record has event 1 the hazard is zero
    everywhere and a degenerate fit (intercept -inf) is returned with a
    warning.
    """
    X, y = _design_from_records(records, covariates)
    return _fit_logistic_matrix(X, y, ("intercept",) + tuple(covariates))


def _hazards_from_design(X: np.ndarray, fit: LogisticFit) -> np.ndarray:
    if np.isneginf(fit.coef[0]):
        return np.zeros(len(X))
    return expit(X @ fit.coef)


def _hazards_for_matrix(mat: _PersonPeriodMatrix, fit: LogisticFit) -> np.ndarray:
    return _hazards_from_design(mat.design(fit.names[1:]), fit)


def cumulative_unswitched_prob(fit: LogisticFit, subject: Subject) -> np.ndarray:
    """Cumulative probability of remaining unswitched through each week.

    Entry k-1 is the product of (1 - hazard) over weeks 1..k; the series
    runs through the subject's last person-period week (switch week
    inclusive).
    """
    mat = _PersonPeriodMatrix([subject])
    h = _hazards_for_matrix(mat, fit)
    return np.cumprod(1.0 - h)


def stabilized_weights(
    fit_num: Optional[LogisticFit],
    fit_den: LogisticFit,
    subject: Subject,
) -> WeightSeries:
    """Weekly inverse probability weights for one subject.

    The week-k weight divides the numerator stay probability through week k
    by the denominator one; ``fit_num=None`` gives unstabilized weights with
    numerator 1. Switchers contribute weights only for the weeks before
    their switch week; the series is empty when the switch happens in week 1
    or follow-up is under a week.
    """
    den = cumulative_unswitched_prob(fit_den, subject)
    k = _weight_length(subject, len(den))
    den = den[:k]
    bad = np.nonzero(den < POSITIVITY_FLOOR)[0]
    if bad.size:
        raise PositivityError(
            f"subject {subject.id}: probability of remaining unswitched fell below "
            f"{POSITIVITY_FLOOR:g} at week {int(bad[0]) + 1}"
        )
    if fit_num is None:
        num = np.ones(k)
    else:
        num = cumulative_unswitched_prob(fit_num, subject)[:k]
    return WeightSeries(subject.id, num / den, fit_num is not None, num, den)


def _weight_length(subject: Subject, n_periods: int) -> int:
    if subject.switch_time is None:
        return n_periods
    w_switch = week_of(subject.switch_time)
    if w_switch <= n_periods:
        return w_switch - 1
    return n_periods


def compute_weights(
    subjects: Sequence[Subject],
    stabilized: bool = True,
    denominator: Sequence[str] = DENOMINATOR_COVARIATES,
    numerator: Sequence[str] = BASELINE_COVARIATES,
    cap_quantile: Optional[float] = None,
    warm_start: Optional[Mapping[str, np.ndarray]] = None,
    return_fits: bool = False,
):
    """Fit the switching models and return a {subject id: WeightSeries} map.

    The denominator model uses baseline covariates plus the carried-forward
    time-varying covariate; the numerator (when stabilizing) uses baseline
    covariates only. ``cap_quantile`` (off by default) truncates weights at
    that quantile of all computed values, a guard against near-positivity
    violations. ``warm_start`` may carry "denominator" and "numerator"
    coefficient vectors to seed the solvers; ``return_fits=True`` returns
    ``(weights, fits)`` with the fitted hazard models under those keys.
    """
    if cap_quantile is not None and not 0.0 < cap_quantile <= 1.0:
        raise ValueError("cap_quantile must be inside (0, 1]")
    warm_start = warm_start or {}
    mat = _PersonPeriodMatrix(subjects)
    y = mat.event
    X_den = mat.design(denominator)
    if tuple(numerator) == tuple(denominator)[: len(numerator)]:
        X_num = X_den[:, : len(numerator) + 1]
    else:
        X_num = mat.design(numerator)
    fit_den = _fit_logistic_matrix(
        X_den, y, ("intercept",) + tuple(denominator), warm_start.get("denominator")
    )
    fit_num = None
    if stabilized:
        fit_num = _fit_logistic_matrix(
            X_num, y, ("intercept",) + tuple(numerator), warm_start.get("numerator")
        )
    h_den = _hazards_from_design(X_den, fit_den)
    h_num = _hazards_from_design(X_num, fit_num) if fit_num is not None else None
    if h_num is not None and np.any(h_num >= 1.0):
        i = int(mat.subject_index[np.argmax(h_num >= 1.0)])
        raise ValueError(
            f"subject {subjects[i].id}: numerator switching hazard saturated at 1"
        )
    out = {}
    offsets = mat.offsets
    for i, sub in enumerate(subjects):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        k = _weight_length(sub, hi - lo)
        den = np.cumprod(1.0 - h_den[lo:hi])[:k]
        # The stay probability is non-increasing, so the last entry is the
        # minimum; locate the first offender only when it exists.
        if k and den[-1] < POSITIVITY_FLOOR:
            bad = int(np.argmax(den < POSITIVITY_FLOOR))
            raise PositivityError(
                f"subject {sub.id}: probability of remaining unswitched fell below "
                f"{POSITIVITY_FLOOR:g} at week {bad + 1}"
            )
        if h_num is None:
            num = np.ones(k)
        else:
            num = np.cumprod(1.0 - h_num[lo:hi])[:k]
        out[sub.id] = WeightSeries._trusted(sub.id, num / den, stabilized, num, den)
    if cap_quantile is not None and out:
        pooled = np.concatenate([ws.values for ws in out.values()])
        if pooled.size:
            cap = float(np.quantile(pooled, cap_quantile))
            for ws in out.values():
                np.minimum(ws.values, cap, out=ws.values)
    if return_fits:
        return out, {"denominator": fit_den, "numerator": fit_num}
    return out
