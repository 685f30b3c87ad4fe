"""Profile-score and Poisson estimators against closed forms and brute force."""

import numpy as np
import pytest
from scipy.optimize import minimize

from recurrent_ipw.data import CountingProcessRow, expand_counting_process
from recurrent_ipw.estimators import (
    breslow_baseline,
    fit_lwyy,
    fit_poisson_constant,
    sandwich_variance,
)
from recurrent_ipw.weights import compute_weights


def subject_rows(sid, x, event_times, end, weight=1.0):
    """Counting-process rows for one subject with scalar covariate x."""
    rows = []
    start = 0.0
    for t in event_times:
        rows.append(CountingProcessRow(sid, start, t, 1, (x,), weight))
        start = t
    if not event_times or event_times[-1] < end:
        rows.append(CountingProcessRow(sid, start, end, 0, (x,), weight))
    return rows


def log_partial_likelihood(rows, beta):
    """Direct weighted log partial likelihood, risk sets scanned per event."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    total = 0.0
    for row in rows:
        if not row.status:
            continue
        t = row.stop
        denom = sum(
            r.weight * np.exp(np.dot(r.covariates, beta))
            for r in rows
            if r.start < t <= r.stop
        )
        total += row.weight * (np.dot(row.covariates, beta) - np.log(denom))
    return total


class TestPoissonClosedForm:
    def test_two_arm_rate_ratio(self):
        rows = subject_rows("a", 0, [0.3, 0.7], 1.0) + subject_rows("b", 1, [0.5], 1.0)
        fit = fit_poisson_constant(rows)
        assert fit.converged
        assert fit.beta[0] == pytest.approx(np.log(0.5), abs=1e-8)
        assert fit.beta[-1] == pytest.approx(np.log(2.0), abs=1e-8)

    def test_intercept_only_rate(self):
        rows = []
        start = 0.0
        for t in (0.4, 0.9, 1.6):
            rows.append(CountingProcessRow("a", start, t, 1, ()))
            start = t
        rows.append(CountingProcessRow("a", start, 2.0, 0, ()))
        fit = fit_poisson_constant(rows)
        assert fit.beta_names == ("intercept",)
        assert fit.beta[0] == pytest.approx(np.log(1.5), abs=1e-8)

    def test_duplication_halves_model_variance(self):
        rows = subject_rows("a", 0, [0.3, 0.7], 1.0) + subject_rows("b", 1, [0.5], 1.0)
        doubled = rows + [
            CountingProcessRow(r.id + "_copy", r.start, r.stop, r.status, r.covariates)
            for r in rows
        ]
        one = fit_poisson_constant(rows)
        two = fit_poisson_constant(doubled)
        assert np.allclose(one.beta, two.beta, atol=1e-10)
        assert np.allclose(two.variance, one.variance / 2.0, rtol=1e-8)


class TestLwyySmallInstances:
    def test_balanced_risk_sets_give_zero(self):
        rows = subject_rows("a", 1, [1.0], 3.0) + subject_rows("b", 0, [2.0], 3.0)
        fit = fit_lwyy(rows)
        assert fit.converged
        assert fit.beta[0] == pytest.approx(0.0, abs=1e-8)

    def test_matches_direct_maximization(self):
        rows = (
            subject_rows("a", 1, [0.5, 1.4], 2.0)
            + subject_rows("b", 0, [0.9], 2.5)
            + subject_rows("c", 1, [2.2], 2.4)
            + subject_rows("d", 0, [], 1.8)
        )
        fit = fit_lwyy(rows)
        res = minimize(
            lambda b: -log_partial_likelihood(rows, b),
            x0=np.zeros(1),
            method="BFGS",
            options={"gtol": 1e-12},
        )
        assert fit.converged
        assert fit.beta[0] == pytest.approx(res.x[0], abs=1e-6)

    def test_weighted_matches_direct_maximization(self):
        rows = (
            subject_rows("a", 1, [0.5, 1.4], 2.0, weight=0.7)
            + subject_rows("b", 0, [0.9], 2.5, weight=1.9)
            + subject_rows("c", 1, [2.2], 2.4, weight=1.2)
            + subject_rows("d", 0, [], 1.8, weight=0.5)
            + subject_rows("e", 0, [1.1], 3.0, weight=2.4)
        )
        fit = fit_lwyy(rows)
        res = minimize(
            lambda b: -log_partial_likelihood(rows, b),
            x0=np.zeros(1),
            method="BFGS",
            options={"gtol": 1e-12},
        )
        assert fit.converged
        assert fit.beta[0] == pytest.approx(res.x[0], abs=1e-6)

    def test_no_events_rejected(self):
        rows = subject_rows("a", 1, [], 2.0)
        with pytest.raises(ValueError):
            fit_lwyy(rows)


class TestLwyyInvariants:
    def test_weight_scale_invariance(self, small_trial):
        weights = compute_weights(small_trial.observed)
        rows = expand_counting_process(small_trial.observed, True, weights=weights)
        scaled = [
            CountingProcessRow(r.id, r.start, r.stop, r.status, r.covariates, 7.5 * r.weight)
            for r in rows
        ]
        base = fit_lwyy(rows)
        rescaled = fit_lwyy(scaled)
        assert np.allclose(base.beta, rescaled.beta, atol=1e-9)

    def test_unit_weights_reduce_to_unweighted(self, small_trial):
        rows = expand_counting_process(small_trial.observed, True)
        explicit = [
            CountingProcessRow(r.id, r.start, r.stop, r.status, r.covariates, 1.0)
            for r in rows
        ]
        assert np.array_equal(fit_lwyy(rows).beta, fit_lwyy(explicit).beta)

    def test_score_norm_small_at_optimum(self, small_trial):
        rows = expand_counting_process(small_trial.observed, True)
        fit = fit_lwyy(rows)
        assert fit.converged
        assert fit.score_norm_at_solution < 1e-6

    def test_poisson_agreement_with_constant_risk_sets(self):
        # one covariate, every subject followed over (0, 2], distinct event times
        rng = np.random.default_rng(5)
        rows = []
        for i in range(40):
            x = i % 2
            times = np.sort(rng.uniform(0.05, 1.95, rng.integers(0, 4)))
            rows.extend(subject_rows(f"s{i}", x, list(np.round(times, 6)), 2.0))
        lwyy = fit_lwyy(rows)
        poisson = fit_poisson_constant(rows)
        assert lwyy.converged and poisson.converged
        assert lwyy.beta[0] == pytest.approx(poisson.beta[0], abs=1e-6)


class TestBreslowBaseline:
    def test_single_subject_unit_jump(self):
        rows = subject_rows("a", 0, [1.0], 2.0)
        base = breslow_baseline(rows, np.zeros(1))
        assert base.jump_times.tolist() == [1.0]
        assert base.jumps[0] == pytest.approx(1.0)

    def test_two_at_risk_half_jump(self):
        rows = subject_rows("a", 0, [1.0], 2.0) + subject_rows("b", 1, [], 2.0)
        base = breslow_baseline(rows, np.zeros(1))
        assert base.jumps[0] == pytest.approx(0.5)

    def test_weight_doubling_cancels(self, small_trial):
        weights = compute_weights(small_trial.observed)
        rows = expand_counting_process(small_trial.observed, True, weights=weights)
        doubled = [
            CountingProcessRow(r.id, r.start, r.stop, r.status, r.covariates, 2.0 * r.weight)
            for r in rows
        ]
        beta = fit_lwyy(rows).beta
        a = breslow_baseline(rows, beta)
        b = breslow_baseline(doubled, beta)
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.allclose(a.jumps, b.jumps, rtol=1e-12)


class TestSandwichVariance:
    @staticmethod
    def direct_score_residual_variance(rows, beta):
        """Brute-force sandwich: per-subject score residuals at beta."""
        beta = np.atleast_1d(beta)
        events = sorted({r.stop for r in rows if r.status})
        subjects = sorted({r.id for r in rows}, key=str)
        p = len(beta)
        A = np.zeros((p, p))
        scores = {s: np.zeros(p) for s in subjects}
        for t in events:
            at_risk = [r for r in rows if r.start < t <= r.stop]
            s0 = sum(r.weight * np.exp(np.dot(r.covariates, beta)) for r in at_risk)
            s1 = sum(
                r.weight * np.exp(np.dot(r.covariates, beta)) * np.asarray(r.covariates)
                for r in at_risk
            )
            xbar = s1 / s0
            dN = sum(r.weight for r in rows if r.status and r.stop == t)
            s2 = sum(
                r.weight
                * np.exp(np.dot(r.covariates, beta))
                * np.outer(r.covariates, r.covariates)
                for r in at_risk
            )
            A += dN * (s2 / s0 - np.outer(xbar, xbar))
            for r in rows:
                if r.status and r.stop == t:
                    scores[r.id] += r.weight * (np.asarray(r.covariates) - xbar)
            for r in at_risk:
                scores[r.id] -= (
                    r.weight * np.exp(np.dot(r.covariates, beta)) / s0
                ) * dN * (np.asarray(r.covariates) - xbar)
        B = sum(np.outer(u, u) for u in scores.values())
        Ainv = np.linalg.inv(A)
        return Ainv @ B @ Ainv

    def test_matches_brute_force_on_five_subjects(self):
        rows = (
            subject_rows("a", 1, [0.5], 2.0)
            + subject_rows("b", 0, [0.9], 2.5)
            + subject_rows("c", 1, [2.2], 2.4)
            + subject_rows("d", 0, [1.3], 1.8)
            + subject_rows("e", 0, [], 3.0)
        )
        fit = fit_lwyy(rows)
        direct = self.direct_score_residual_variance(rows, fit.beta)
        assert np.allclose(fit.variance, direct, rtol=1e-8)
        assert np.allclose(sandwich_variance(rows, fit.beta), direct, rtol=1e-8)

    def test_duplication_halves_robust_variance(self):
        rows = (
            subject_rows("a", 1, [0.5, 1.1], 2.0)
            + subject_rows("b", 0, [0.9], 2.5)
            + subject_rows("c", 1, [], 2.4)
            + subject_rows("d", 0, [1.3], 1.8)
        )
        doubled = rows + [
            CountingProcessRow(str(r.id) + "x", r.start, r.stop, r.status, r.covariates, r.weight)
            for r in rows
        ]
        fit = fit_lwyy(rows)
        v1 = sandwich_variance(rows, fit.beta)
        v2 = sandwich_variance(doubled, fit.beta)
        assert np.allclose(v2, v1 / 2.0, rtol=1e-10)
