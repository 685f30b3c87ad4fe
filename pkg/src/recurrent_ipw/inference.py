"""Confidence intervals and tests for treatment effect estimates.

Percentile bootstrap intervals resample subjects with replacement and
re-run the full estimation pipeline, including weight estimation, on each
replicate. Wald intervals combine a point estimate with a model or sandwich
standard error.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .data import Subject
from .seeding import rng_for

MAX_FAILURE_FRACTION = 0.1

_REPLICATE_ERRORS = (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError)


@dataclass
class BootstrapResult:
    """Percentile bootstrap summary for one estimator."""

    point_estimate: float
    ci: Tuple[float, float]
    se_boot: float
    estimates: np.ndarray
    all_estimates: list
    replicate_converged: list
    n_replicates: int
    n_failures: int
    alpha: float


def _order_statistic(sorted_values: np.ndarray, q: float) -> float:
    """Empirical quantile as the ceil(q * B)-th order statistic."""
    b = len(sorted_values)
    rank = max(1, math.ceil(q * b))
    return float(sorted_values[min(rank, b) - 1])


def multi_bootstrap(
    subjects: Sequence[Subject],
    estimators: Mapping[str, Callable],
    n_boot: int,
    seed: int,
    alpha: float = 0.05,
    spawn_prefix: Tuple[int, ...] = (),
) -> Mapping[str, BootstrapResult]:
    """Bootstrap several estimators on shared resamples.

    ``estimators`` maps a name to a callable ``(subjects, shared) -> float``
    where ``shared`` is a scratch dict, fresh for each resample, that lets
    estimators reuse intermediate results (re-estimated weights above all).
    Its "run_cache" entry is the same dict on every call, seeded by the
    point-estimate pass, for replicate-independent artifacts such as warm
    starts. Resampled subjects are relabeled with fresh ids (b0, b1, ...) so
    duplicated draws enter weight estimation as distinct subjects.
    Replicate b draws its resample from the stream (seed, *spawn_prefix, b),
    so results do not depend on evaluation order. A replicate fails for an
    estimator when it raises an estimation error or returns a non-finite
    value; more than ``MAX_FAILURE_FRACTION`` failures is an error.
    """
    subjects = list(subjects)
    m = len(subjects)
    if m == 0:
        raise ValueError("cannot bootstrap an empty subject list")
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be inside (0, 1)")

    run_cache: dict = {}
    shared0: dict = {"run_cache": run_cache}
    points = {}
    for name, fn in estimators.items():
        points[name] = float(fn(subjects, shared0))

    all_estimates = {name: [] for name in estimators}
    converged = {name: [] for name in estimators}
    for b in range(n_boot):
        rng = rng_for(seed, *spawn_prefix, b)
        idx = rng.integers(0, m, size=m)
        sample = [
            dataclasses.replace(subjects[i], id=f"b{j}") for j, i in enumerate(idx)
        ]
        shared: dict = {"run_cache": run_cache}
        for name, fn in estimators.items():
            try:
                est = float(fn(sample, shared))
                ok = math.isfinite(est)
            except _REPLICATE_ERRORS:
                est, ok = math.nan, False
            all_estimates[name].append(est if ok else math.nan)
            converged[name].append(ok)

    out = {}
    for name in estimators:
        good = np.array([e for e, ok in zip(all_estimates[name], converged[name]) if ok])
        n_fail = n_boot - len(good)
        if n_fail > MAX_FAILURE_FRACTION * n_boot:
            raise RuntimeError(
                f"bootstrap for {name!r} failed on {n_fail} of {n_boot} replicates"
            )
        good.sort()
        ci = (
            _order_statistic(good, alpha / 2.0),
            _order_statistic(good, 1.0 - alpha / 2.0),
        )
        se = float(np.std(good, ddof=1)) if len(good) > 1 else math.nan
        out[name] = BootstrapResult(
            point_estimate=points[name],
            ci=ci,
            se_boot=se,
            estimates=good,
            all_estimates=all_estimates[name],
            replicate_converged=converged[name],
            n_replicates=n_boot,
            n_failures=n_fail,
            alpha=alpha,
        )
    return out


def percentile_bootstrap(
    subjects: Sequence[Subject],
    estimator: Callable,
    n_boot: int,
    seed: int,
    alpha: float = 0.05,
) -> BootstrapResult:
    """Percentile bootstrap CI for one estimator.

    ``estimator`` maps a subject list to a scalar estimate and is re-run in
    full on every resample. The interval takes the empirical alpha/2 and
    1 - alpha/2 quantiles of the replicate estimates.
    """
    results = multi_bootstrap(
        subjects, {"estimate": lambda subs, shared: estimator(subs)}, n_boot, seed, alpha
    )
    return results["estimate"]


def wald_ci(estimate: float, se: float, alpha: float = 0.05) -> Tuple[float, float]:
    """Normal-approximation interval estimate +- z_{1-alpha/2} * se."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be inside (0, 1)")
    if se < 0 or not math.isfinite(se):
        raise ValueError("standard error must be finite and non-negative")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return (estimate - z * se, estimate + z * se)


def reject_null(ci: Tuple[float, float], null_value: float = 0.0) -> bool:
    """True when the interval excludes the null value strictly."""
    lo, hi = ci
    if lo > hi:
        raise ValueError("interval bounds are out of order")
    return bool(lo > null_value or hi < null_value)
