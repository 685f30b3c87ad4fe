"""Estimation pipelines: one call from subjects to a fitted treatment effect.

An approach fixes how follow-up, events, and weights are prepared; a model
fixes the estimator run on the prepared data. The hypothetical approach
fits the counterfactual no-switching record, treatment_policy uses all
observed events, simple_censoring truncates at the switch with unit
weights, and the IPW approaches truncate at the switch and weight by
inverse probabilities of remaining unswitched.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, List, Mapping, Optional, Sequence

from .data import Subject
from .estimators import FitResult, _fit_lwyy_arrays, _RowArrays
from .nb import NBData, fit_nb_constant, fit_nb_semiparam
from .weights import WeightSeries, compute_weights

MODELS = ("lwyy", "nb")
APPROACHES = (
    "hypothetical",
    "treatment_policy",
    "simple_censoring",
    "lwyy_ipw",
    "nb_ipw",
    "naive_nb_ipw",
)
MODEL_APPROACHES = {
    "lwyy": ("hypothetical", "treatment_policy", "simple_censoring", "lwyy_ipw"),
    "nb": ("hypothetical", "treatment_policy", "simple_censoring", "nb_ipw", "naive_nb_ipw"),
}
BOOTSTRAP_SPECS = ("lwyy_ipw", "nb_ipw", "naive_nb_ipw", "lwyy", "nb")

_IPW_APPROACHES = ("lwyy_ipw", "nb_ipw", "naive_nb_ipw")


def hypothetical_subjects(subjects: Sequence[Subject]) -> List[Subject]:
    """Repackage the counterfactual record as standalone subjects."""
    out = []
    for s in subjects:
        if s.cf_event_times is None:
            raise ValueError(f"subject {s.id} carries no counterfactual event record")
        out.append(
            dataclasses.replace(
                s,
                event_times=s.cf_event_times,
                switch_time=None,
                tv_series=s.cf_tv_series if s.cf_tv_series is not None else s.tv_series,
                cf_event_times=None,
                cf_tv_series=None,
            )
        )
    return out


def shared_weights(
    subjects: Sequence[Subject],
    shared: Optional[dict] = None,
    stabilized: bool = True,
) -> Mapping[str, WeightSeries]:
    """Weight map for a subject list, memoized in a scratch dict when given.

    Bootstrap replicates pass the per-resample scratch dict so that the
    switching models are re-estimated once per resample, not once per
    estimator. A "run_cache" entry in the scratch dict persists across
    resamples and carries warm starts from the first fit.
    """
    if shared is None:
        return compute_weights(subjects, stabilized=stabilized)
    key = ("weights", stabilized)
    if key not in shared:
        run_cache = shared.get("run_cache")
        warm_key = ("warm_weights", stabilized)
        warm = run_cache.get(warm_key) if run_cache is not None else None
        weights, fits = compute_weights(
            subjects, stabilized=stabilized, warm_start=warm, return_fits=True
        )
        if run_cache is not None and warm_key not in run_cache:
            run_cache[warm_key] = {
                name: fit.coef for name, fit in fits.items() if fit is not None
            }
        shared[key] = weights
    return shared[key]


def _memo(cache: Optional[dict], key, build):
    if cache is None:
        return build()
    if key not in cache:
        cache[key] = build()
    return cache[key]


def fit_approach(
    subjects: Sequence[Subject],
    model: str,
    approach: str,
    weights: Optional[Mapping[str, WeightSeries]] = None,
    cache: Optional[dict] = None,
    warm: Optional[dict] = None,
) -> FitResult:
    """Prepare data for one approach and fit one model on it.

    ``weights`` supplies precomputed weight series for the IPW approaches;
    when omitted they are estimated from ``subjects``. The IPW approaches
    are model-specific: ``lwyy_ipw`` pairs with the LWYY model, ``nb_ipw``
    with the semiparametric NB, and ``naive_nb_ipw`` with the constant-rate
    NB on never-switchers. ``cache`` memoizes prepared data across calls on
    the same subject list; ``warm`` may carry "beta" and "phi" starting
    values for the iterative fits.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if approach not in APPROACHES:
        raise ValueError(f"unknown approach {approach!r}")
    if approach not in MODEL_APPROACHES[model]:
        raise ValueError(f"approach {approach!r} does not apply to model {model!r}")
    if approach in _IPW_APPROACHES and weights is None:
        weights = compute_weights(subjects)
    beta0 = warm.get("beta") if warm else None

    if approach == "hypothetical":
        prepared = _memo(cache, ("hyp_subjects",), lambda: hypothetical_subjects(subjects))
        censored = False
    elif approach == "treatment_policy":
        prepared, censored = subjects, False
    else:
        prepared, censored = subjects, True

    if model == "lwyy":
        if approach == "lwyy_ipw":
            arr = _RowArrays.from_subjects(prepared, censored, weights=weights)
            series = [weights[s.id].values for s in prepared]
            return _fit_lwyy_arrays(arr, beta_init=beta0, weight_series=series)
        arr = _memo(
            cache,
            ("lwyy_rows", approach == "hypothetical", censored),
            lambda: _RowArrays.from_subjects(prepared, censored),
        )
        return _fit_lwyy_arrays(arr, beta_init=beta0)

    data = _memo(
        cache,
        ("nbdata", approach == "hypothetical", censored),
        lambda: NBData.from_subjects(prepared, censored),
    )
    if approach == "naive_nb_ipw":
        return fit_nb_constant(data, mode="naive_ipw", weights=weights)
    if approach == "nb_ipw":
        phi0 = warm.get("phi") if warm else None
        return fit_nb_semiparam(data, weights=weights, beta_init=beta0, phi_init=phi0)
    return fit_nb_constant(data)


def _spec_fit(spec: str, sample: Sequence[Subject], shared: Optional[dict]) -> FitResult:
    run_cache = shared.get("run_cache") if shared is not None else None
    warm = run_cache.get(("warm", spec)) if run_cache is not None else None
    if spec in _IPW_APPROACHES:
        w = shared_weights(sample, shared)
        model = "lwyy" if spec == "lwyy_ipw" else "nb"
        fit = fit_approach(sample, model, spec, weights=w, cache=shared, warm=warm)
    elif spec == "lwyy":
        fit = fit_approach(sample, "lwyy", "simple_censoring", cache=shared, warm=warm)
    elif spec == "nb":
        fit = fit_approach(sample, "nb", "simple_censoring", cache=shared, warm=warm)
    else:
        raise ValueError(f"unknown bootstrap estimator {spec!r}")
    if run_cache is not None and fit.converged and ("warm", spec) not in run_cache:
        run_cache[("warm", spec)] = {"beta": fit.beta, "phi": fit.phi}
    return fit


def bootstrap_estimator(spec: str) -> Callable:
    """Callable (sample, shared) -> treatment coefficient, for bootstrapping.

    ``lwyy`` and ``nb`` are the unweighted simple-censoring fits; the IPW
    specs re-estimate weights on each resample through the shared scratch
    dict. A non-converged fit raises, which the bootstrap records as a
    failed replicate.
    """
    if spec not in BOOTSTRAP_SPECS:
        raise ValueError(f"unknown bootstrap estimator {spec!r}")

    def estimate(sample: Sequence[Subject], shared: Optional[dict] = None) -> float:
        fit = _spec_fit(spec, sample, shared)
        if not fit.converged:
            raise RuntimeError(f"{spec} fit did not converge on a bootstrap resample")
        return fit.arm_estimate

    return estimate
