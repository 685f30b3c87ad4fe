"""Poisson and Andersen-Gill/LWYY rate models with weighted risk sets.

The LWYY estimator solves the weighted profile score

    U(beta) = sum_i int Y*_i(t) w_i(t) {X_i - S1(t;beta)/S0(t;beta)} dN_i(t)

with S_k(t) = sum_j Y*_j(t) w_j(t) X_j^(k) exp(X_j' beta). Variance is the
robust sandwich A^{-1} B A^{-1} with per-subject score residuals; the
baseline is the weighted Breslow estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import COVARIATE_NAMES, CountingProcessRow, _weight_lookup, complete_weeks

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 100


@dataclass
class FitResult:
    beta: np.ndarray
    beta_names: tuple
    variance: Optional[np.ndarray]
    phi: Optional[float]
    converged: bool
    n_iterations: int
    score_norm_at_solution: float
    loglik: Optional[float] = None

    @property
    def arm_estimate(self) -> float:
        return float(self.beta[0])


@dataclass
class BaselineEstimate:
    jump_times: np.ndarray
    jumps: np.ndarray


def _coef_names(p: int) -> tuple:
    return COVARIATE_NAMES if p == len(COVARIATE_NAMES) else tuple(f"x{i+1}" for i in range(p))


class _RowArrays:
    """Struct-of-arrays view of counting-process rows, grouped by subject."""

    def __init__(self, start, stop, status, X, weight, group, n_groups):
        self.start = start
        self.stop = stop
        self.status = status
        self.X = X
        self.weight = weight
        self.group = group
        self.n_groups = n_groups

    @classmethod
    def from_rows(cls, rows: Sequence[CountingProcessRow]) -> "_RowArrays":
        if not rows:
            raise ValueError("no rows supplied")
        n = len(rows)
        p = len(rows[0].covariates)
        start = np.empty(n)
        stop = np.empty(n)
        status = np.empty(n, dtype=bool)
        X = np.empty((n, p))
        weight = np.empty(n)
        group = np.empty(n, dtype=np.int64)
        index: dict = {}
        for i, r in enumerate(rows):
            start[i] = r.start
            stop[i] = r.stop
            status[i] = bool(r.status)
            X[i] = r.covariates
            weight[i] = r.weight
            group[i] = index.setdefault(r.id, len(index))
        if np.any(weight <= 0):
            raise ValueError("row weights must be positive")
        return cls(start, stop, status, X, weight, group, len(index))

    @classmethod
    def from_subjects(cls, subjects, censor_at_switch, weights=None, validate=True) -> "_RowArrays":
        """Build row arrays straight from subjects, bypassing row objects.

        Produces the same arrays as ``from_rows(expand_counting_process(...))``
        for subjects with distinct ids, without materializing the rows. Groups
        are positional, so duplicated ids stay separate subjects here.
        """
        if not len(subjects):
            raise ValueError("no rows supplied")
        starts: list = []
        stops: list = []
        statuses: list = []
        weight_list: Optional[list] = [] if weights is not None else None
        counts = np.empty(len(subjects), dtype=np.int64)
        for i, subj in enumerate(subjects):
            if validate:
                subj.validate()
            end = subj.followup_end(censor_at_switch)
            stop = subj.observed_events(censor_at_switch).tolist()
            n_events = len(stop)
            if not n_events or stop[-1] < end:
                stop.append(end)
            counts[i] = len(stop)
            starts.append(0.0)
            starts.extend(stop[:-1])
            stops.extend(stop)
            statuses.extend([True] * n_events)
            if len(stop) > n_events:
                statuses.append(False)
            if weight_list is not None:
                if subj.id not in weights:
                    raise ValueError(f"subject {subj.id}: no weight series supplied")
                series_values = weights[subj.id].values
                weight_list.extend(
                    _weight_lookup(series_values, complete_weeks(s)) for s in stop
                )
        X_sub = np.array([subj.covariates for subj in subjects], dtype=np.float64)
        if weight_list is None:
            weight = np.ones(len(stops))
        else:
            weight = np.asarray(weight_list, dtype=np.float64)
            if np.any(weight <= 0):
                raise ValueError("row weights must be positive")
        return cls(
            np.asarray(starts, dtype=np.float64),
            np.asarray(stops, dtype=np.float64),
            np.asarray(statuses, dtype=bool),
            np.repeat(X_sub, counts, axis=0),
            weight,
            np.repeat(np.arange(len(subjects)), counts),
            len(subjects),
        )


class _LwyyWork:
    """Risk-set machinery shared by the solver, baseline, and sandwich.

    By default a row's weight applies across its whole (start, stop] span.
    ``jump_weights`` (rows x jump times) overrides the weight each row
    contributes to each risk set, so a weekly weight step function can vary
    within a row; event terms always use the row weight, which coincides
    with the jump weight at the event's own time.
    """

    def __init__(self, arr: _RowArrays, jump_weights: Optional[np.ndarray] = None):
        self.arr = arr
        ev = arr.status
        if not np.any(ev):
            raise ValueError("no events in the data")
        self.times = np.unique(arr.stop[ev])
        # row r is at risk at jump k iff start_r < t_k <= stop_r
        self.mask = (arr.start[:, None] < self.times[None, :]) & (
            self.times[None, :] <= arr.stop[:, None]
        )
        self.jump_weights = jump_weights
        self.ev_rows = np.flatnonzero(ev)
        self.ev_k = np.searchsorted(self.times, arr.stop[self.ev_rows])
        self.ev_w = arr.weight[self.ev_rows]
        self.dw = np.bincount(self.ev_k, weights=self.ev_w, minlength=self.times.size)

    def risk_sums(self, beta: np.ndarray):
        """Shifted S0 and risk-set means at each jump; shift returned for
        anything that needs the absolute scale."""
        arr = self.arr
        eta = arr.X @ beta
        shift = float(eta.max())
        r = np.exp(eta - shift)
        if self.jump_weights is None:
            E = self.mask * (arr.weight * r)[:, None]
        else:
            E = self.mask * (self.jump_weights * r[:, None])
        S0 = E.sum(axis=0)
        if np.any(S0 <= 0):
            raise ValueError("empty weighted risk set at an event time")
        Xbar = (E.T @ arr.X) / S0[:, None]
        return eta, shift, E, S0, Xbar

    def score_info(self, beta: np.ndarray):
        arr = self.arr
        eta, shift, E, S0, Xbar = self.risk_sums(beta)
        U = (self.ev_w[:, None] * (arr.X[self.ev_rows] - Xbar[self.ev_k])).sum(axis=0)
        g = E @ (self.dw / S0)
        A = arr.X.T @ (g[:, None] * arr.X) - (self.dw[:, None] * Xbar).T @ Xbar
        lpl = float(self.ev_w @ eta[self.ev_rows] - self.dw @ (np.log(S0) + shift))
        return U, A, lpl


def _lwyy_solve(work: _LwyyWork, beta0: Optional[np.ndarray] = None):
    p = work.arr.X.shape[1]
    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    U, A, lpl = work.score_info(beta)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        score_norm = float(np.max(np.abs(U)))
        if score_norm < SCORE_TOL:
            converged = True
            break
        try:
            step = np.linalg.solve(A, U)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        for _ in range(40):
            cand = beta + lam * step
            try:
                U_new, A_new, lpl_new = work.score_info(cand)
            except (FloatingPointError, ValueError):
                lam *= 0.5
                continue
            # Tolerance scales with |lpl|: near the optimum the true change is
            # below the rounding noise of the partial likelihood itself.
            if np.isfinite(lpl_new) and lpl_new >= lpl - 1e-12 * (1.0 + abs(lpl)):
                break
            lam *= 0.5
        else:
            break
        rel_change = np.max(np.abs(cand - beta)) / (1.0 + np.max(np.abs(beta)))
        beta, U, A, lpl = cand, U_new, A_new, lpl_new
        if np.max(np.abs(beta)) > 200:
            break
        if rel_change < STEP_TOL:
            converged = True
            break
    score_norm = float(np.max(np.abs(U)))
    if converged and score_norm >= 1e-6:
        converged = False
    return beta, A, converged, it, score_norm, lpl


def _sandwich_from_work(work: _LwyyWork, beta: np.ndarray, A: Optional[np.ndarray] = None):
    arr = work.arr
    if A is None:
        _, A, _ = work.score_info(beta)
    eta, shift, E, S0, Xbar = work.risk_sums(beta)
    delta = work.dw / S0
    P = E * delta[None, :]
    p1 = P.sum(axis=1)
    comp = p1[:, None] * arr.X - P @ Xbar
    score_rows = -comp
    score_rows[work.ev_rows] += work.ev_w[:, None] * (
        arr.X[work.ev_rows] - Xbar[work.ev_k]
    )
    Ug = np.zeros((arr.n_groups, arr.X.shape[1]))
    np.add.at(Ug, arr.group, score_rows)
    B = Ug.T @ Ug
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise ValueError("singular information matrix in sandwich variance")
    return Ainv @ B @ Ainv


def fit_lwyy(rows: Sequence[CountingProcessRow], beta_init=None) -> FitResult:
    """Weighted LWYY fit; unit weights reproduce the Andersen-Gill estimate."""
    return _fit_lwyy_arrays(_RowArrays.from_rows(rows), beta_init)


def _jump_weight_matrix(arr: _RowArrays, times: np.ndarray, series) -> np.ndarray:
    """Each subject's weekly weight evaluated at every jump time.

    ``series`` lists one weekly value array per group in group order. Lookup
    matches the row-weight convention: the weight at jump t is the value for
    week floor(52 t), clamped to the series length, 1.0 at week zero or for
    an empty series.
    """
    week_idx = np.array([complete_weeks(t) for t in times], dtype=np.int64)
    W = np.ones((arr.n_groups, times.size))
    for g, vals in enumerate(series):
        if vals.size:
            idx = np.maximum(np.minimum(week_idx, vals.size) - 1, 0)
            W[g] = np.where(week_idx <= 0, 1.0, vals[idx])
    return W[arr.group]


def _fit_lwyy_arrays(arr: _RowArrays, beta_init=None, weight_series=None) -> FitResult:
    if weight_series is None:
        work = _LwyyWork(arr)
    else:
        ev_times = np.unique(arr.stop[arr.status])
        work = _LwyyWork(arr, _jump_weight_matrix(arr, ev_times, weight_series))
    beta, A, converged, n_iter, score_norm, lpl = _lwyy_solve(work, beta_init)
    variance = None
    if converged:
        variance = _sandwich_from_work(work, beta, A)
    return FitResult(
        beta=beta,
        beta_names=_coef_names(arr.X.shape[1]),
        variance=variance,
        phi=None,
        converged=converged,
        n_iterations=n_iter,
        score_norm_at_solution=score_norm,
        loglik=lpl,
    )


def breslow_baseline(rows: Sequence[CountingProcessRow], beta) -> BaselineEstimate:
    """Weighted Breslow baseline increments at each distinct event time."""
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    arr = _RowArrays.from_rows(rows)
    work = _LwyyWork(arr)
    _, shift, _, S0, _ = work.risk_sums(beta)
    jumps = work.dw / (S0 * np.exp(shift))
    return BaselineEstimate(jump_times=work.times.copy(), jumps=jumps)


def sandwich_variance(rows: Sequence[CountingProcessRow], beta) -> np.ndarray:
    """Robust variance of the weighted LWYY estimator, grouped by subject id."""
    beta = np.asarray(beta, dtype=np.float64)
    arr = _RowArrays.from_rows(rows)
    work = _LwyyWork(arr)
    return _sandwich_from_work(work, beta)


def _poisson_newton(Xt, counts, exposure, v, start=None):
    """Damped Newton for a Poisson log-rate model with exposure offsets.

    Xt includes the intercept column last; counts may be non-integral
    (weighted event sums). Returns (params, info, converged, iters, norm, ll).
    """
    n, q = Xt.shape
    log_expo = np.log(exposure)
    if start is None:
        params = np.zeros(q)
        params[-1] = np.log((v * counts).sum() / (v * exposure).sum())
    else:
        params = np.asarray(start, dtype=np.float64).copy()

    def eval_at(th):
        lin = Xt @ th
        mu = np.exp(lin) * exposure
        ll = float(v @ (counts * lin - mu))
        score = Xt.T @ (v * (counts - mu))
        return lin, mu, ll, score

    lin, mu, ll, score = eval_at(params)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        norm = float(np.max(np.abs(score)))
        if norm < SCORE_TOL:
            converged = True
            break
        info = Xt.T @ ((v * mu)[:, None] * Xt)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        for _ in range(40):
            cand = params + lam * step
            lin_n, mu_n, ll_n, score_n = eval_at(cand)
            if np.isfinite(ll_n) and ll_n >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            lam *= 0.5
        else:
            break
        rel = np.max(np.abs(cand - params)) / (1.0 + np.max(np.abs(params)))
        params, mu, ll, score = cand, mu_n, ll_n, score_n
        if np.max(np.abs(params)) > 100:
            break
        if rel < STEP_TOL:
            converged = True
            break
    info = Xt.T @ ((v * mu)[:, None] * Xt)
    norm = float(np.max(np.abs(score)))
    if converged and norm >= 1e-6:
        converged = False
    return params, info, converged, it, norm, ll


def fit_poisson_constant(rows: Sequence[CountingProcessRow]) -> FitResult:
    """Constant-baseline Poisson regression on subject totals.

    Weighted rows contribute weighted event counts and weighted exposure, so
    unit weights reduce to the plain events/exposure likelihood.
    """
    arr = _RowArrays.from_rows(rows)
    G = arr.n_groups
    p = arr.X.shape[1]
    counts = np.zeros(G)
    np.add.at(counts, arr.group[arr.status], arr.weight[arr.status])
    exposure = np.zeros(G)
    np.add.at(exposure, arr.group, arr.weight * (arr.stop - arr.start))
    X = np.zeros((G, p))
    X[arr.group] = arr.X
    if counts.sum() <= 0:
        raise ValueError("no events in the data")
    Xt = np.column_stack([X, np.ones(G)])
    if np.linalg.matrix_rank(Xt) < p + 1:
        raise ValueError("rank-deficient design matrix")
    params, info, converged, n_iter, norm, ll = _poisson_newton(
        Xt, counts, exposure, np.ones(G)
    )
    variance = None
    if converged:
        variance = np.linalg.inv(info)
    return FitResult(
        beta=params,
        beta_names=(*_coef_names(p), "intercept"),
        variance=variance,
        phi=None,
        converged=converged,
        n_iterations=n_iter,
        score_norm_at_solution=norm,
        loglik=ll,
    )
