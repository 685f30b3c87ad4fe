"""Negative binomial likelihoods against independent evaluations and grids."""

import itertools
import math

import numpy as np
import pytest

from recurrent_ipw.data import expand_counting_process
from recurrent_ipw.estimators import breslow_baseline, fit_lwyy
from recurrent_ipw.nb import (
    NBData,
    conditional_frailty_mean,
    fit_nb_constant,
    fit_nb_semiparam,
    nb_loglik_constant,
    nb_loglik_constant_grad,
    nb_pseudo_loglik,
    nb_pseudo_loglik_grad,
)


def make_nbdata(counts, exposures, xs, event_times=None):
    counts = np.asarray(counts, dtype=float)
    return NBData(
        ids=[f"s{i}" for i in range(len(counts))],
        counts=counts,
        tau_used=np.asarray(exposures, dtype=float),
        X=np.asarray(xs, dtype=float).reshape(len(counts), -1),
        event_times=event_times,
    )


class TestConditionalFrailtyMean:
    def test_degenerate_frailty(self):
        assert conditional_frailty_mean(0.0, 5.0, 2.0) == 1.0

    def test_ratio_symmetry(self):
        assert conditional_frailty_mean(0.7, 3.0, 3.0) == pytest.approx(1.0)

    def test_direct_arithmetic(self):
        assert conditional_frailty_mean(0.5, 2.0, 1.0) == pytest.approx(4.0 / 3.0)

    def test_monotone_in_history(self):
        values = [conditional_frailty_mean(0.5, n, 1.5) for n in range(6)]
        assert all(b > a for a, b in zip(values, values[1:]))
        flat = [conditional_frailty_mean(0.0, n, 1.5) for n in range(6)]
        assert all(v == 1.0 for v in flat)

    def test_normalized_at_time_zero(self):
        assert conditional_frailty_mean(0.8, 0.0, 0.0) == 1.0

    def test_rejects_negative_arguments(self):
        with pytest.raises(ValueError):
            conditional_frailty_mean(-0.1, 0.0, 0.0)


class TestConstantLoglik:
    def test_zero_count_reduction(self):
        data = make_nbdata([0, 0], [1.0, 2.0], [[0.0], [1.0]])
        phi, alpha0, beta = 0.4, -0.2, 0.3
        expected = sum(
            -(1.0 / phi) * math.log(1.0 + phi * math.exp(alpha0 + beta * x) * e)
            for x, e in ((0.0, 1.0), (1.0, 2.0))
        )
        assert nb_loglik_constant(data, alpha0, [beta], phi) == pytest.approx(expected, abs=1e-12)

    def test_phi_zero_matches_poisson(self):
        data = make_nbdata([0, 1, 3], [1.0, 1.0, 2.0], [[0.0], [0.0], [1.0]])
        alpha0, beta = 0.1, -0.4
        poisson = 0.0
        for n, e, x in ((0, 1.0, 0.0), (1, 1.0, 0.0), (3, 2.0, 1.0)):
            lin = alpha0 + beta * x
            poisson += n * lin - math.exp(lin) * e
        assert nb_loglik_constant(data, alpha0, [beta], 0.0) == pytest.approx(poisson, abs=1e-10)

    def test_three_subject_direct_evaluation(self):
        data = make_nbdata([0, 1, 3], [1.0, 1.0, 2.0], [[0.0], [0.0], [1.0]])
        alpha0, beta, phi = 0.2, -0.5, 0.6
        expected = 0.0
        for n, e, x in ((0, 1.0, 0.0), (1, 1.0, 0.0), (3, 2.0, 1.0)):
            lin = alpha0 + beta * x
            mu = math.exp(lin) * e
            term = sum(math.log(1.0 + phi * j) for j in range(1, n))
            term += n * lin
            term -= (n + 1.0 / phi) * math.log(1.0 + phi * mu)
            expected += term
        assert nb_loglik_constant(data, alpha0, [beta], phi) == pytest.approx(expected, rel=1e-12)

    def test_gradient_spot_check(self):
        data = make_nbdata([0, 2, 3, 1], [1.0, 1.5, 2.0, 0.7], [[0.0], [0.0], [1.0], [1.0]])
        rng = np.random.default_rng(2)
        for _ in range(5):
            alpha0, beta = rng.normal(0, 0.5, 2)
            phi = float(rng.uniform(0.05, 1.2))
            grad = nb_loglik_constant_grad(data, alpha0, [beta], phi)
            for k, (da, db, dp) in enumerate(np.eye(3)):
                h = 1e-6 * max(1.0, abs((alpha0, beta, phi)[k]))
                up = nb_loglik_constant(data, alpha0 + h * da, [beta + h * db], phi + h * dp)
                dn = nb_loglik_constant(data, alpha0 - h * da, [beta - h * db], phi - h * dp)
                num = (up - dn) / (2 * h)
                assert grad[k] == pytest.approx(num, rel=1e-4, abs=1e-7)


class TestFitNbConstant:
    def test_equidispersed_hits_boundary(self):
        data = make_nbdata([1] * 6, [1.0] * 6, [[0.0]] * 3 + [[1.0]] * 3)
        fit = fit_nb_constant(data)
        assert fit.phi == 0.0
        # every subject one event and equal exposure: rates equal, beta zero
        assert fit.beta[0] == pytest.approx(0.0, abs=1e-8)
        assert fit.beta[-1] == pytest.approx(0.0, abs=1e-8)

    def test_six_subject_grid_oracle(self):
        data = make_nbdata(
            [0, 5, 1, 7, 2, 0],
            [1.0, 1.2, 0.8, 1.5, 1.0, 0.9],
            [[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]],
        )
        fit = fit_nb_constant(data)
        assert fit.converged and fit.phi > 0

        best = None
        center = (fit.beta[-1], fit.beta[0], fit.phi)
        grids = [np.linspace(c - 0.02, c + 0.02, 21) for c in center]
        grids[2] = np.clip(grids[2], 1e-8, None)
        for a0, b, p in itertools.product(*grids):
            val = nb_loglik_constant(data, a0, [b], p)
            if best is None or val > best[0]:
                best = (val, a0, b, p)
        assert fit.beta[-1] == pytest.approx(best[1], abs=1e-3)
        assert fit.beta[0] == pytest.approx(best[2], abs=1e-3)
        assert fit.phi == pytest.approx(best[3], abs=1e-3)

    def test_score_residuals_vanish_at_interior_fit(self):
        data = make_nbdata(
            [0, 5, 1, 7, 2, 0],
            [1.0, 1.2, 0.8, 1.5, 1.0, 0.9],
            [[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]],
        )
        fit = fit_nb_constant(data)
        assert fit.phi > 0
        grad = nb_loglik_constant_grad(data, fit.beta[-1], fit.beta[:-1], fit.phi)
        assert np.max(np.abs(grad)) < 1e-6

    def test_naive_mode_requires_weights_and_switch_info(self):
        data = make_nbdata([1, 2], [1.0, 1.0], [[0.0], [1.0]])
        with pytest.raises(ValueError):
            fit_nb_constant(data, mode="naive_ipw")
        with pytest.raises(ValueError):
            fit_nb_constant(data, mode="bogus")

    def test_unit_weight_naive_reduces_to_unweighted(self, small_trial):
        non_switchers = [s for s in small_trial.observed if s.switch_time is None]
        data = NBData.from_subjects(non_switchers, censor_at_switch=True)

        class Ones:
            values = np.ones(300)

        weighted = fit_nb_constant(data, mode="naive_ipw", weights={s.id: Ones() for s in non_switchers})
        plain = fit_nb_constant(data)
        assert np.array_equal(weighted.beta, plain.beta)
        assert weighted.phi == plain.phi


class TestPseudoLoglik:
    @staticmethod
    def brute_force(data, beta, phi, weights=None):
        """Slow per-jump-time summation with an explicit Breslow baseline."""
        m = data.n_subjects
        times = np.unique(np.concatenate([t for t in data.event_times if len(t)]))
        beta = np.atleast_1d(beta)
        r = np.exp(data.X @ beta)
        if weights is None:
            wfun = lambda i, t: 1.0
        else:
            from recurrent_ipw.data import _weight_lookup, complete_weeks

            wfun = lambda i, t: _weight_lookup(
                weights[data.ids[i]].values, complete_weeks(t)
            )
        delta = {}
        for t in times:
            num = sum(
                wfun(i, t)
                for i in range(m)
                for ev in [data.event_times[i]]
                if np.any(ev == t)
            )
            den = sum(
                wfun(i, t) * r[i] for i in range(m) if data.tau_used[i] >= t
            )
            delta[t] = num / den
        total = 0.0
        for i in range(m):
            mu = 0.0
            n_before = 0
            ev = np.asarray(data.event_times[i])
            for t in times:
                if data.tau_used[i] < t:
                    break
                frailty = (1.0 + phi * n_before) / (1.0 + phi * mu)
                if np.any(ev == t):
                    total += wfun(i, t) * (
                        math.log(frailty) + math.log(r[i]) + math.log(delta[t])
                    )
                total -= wfun(i, t) * r[i] * frailty * delta[t]
                mu += r[i] * delta[t]
                n_before += int(np.sum(ev == t))
        return total

    def make_data(self):
        return make_nbdata(
            [1, 2, 0, 1],
            [2.0, 2.5, 1.5, 2.2],
            [[1.0], [0.0], [1.0], [0.0]],
            event_times=[
                np.array([0.8]),
                np.array([0.5, 1.7]),
                np.array([]),
                np.array([1.2]),
            ],
        )

    def test_four_subject_brute_force(self):
        data = self.make_data()
        for beta, phi in ((0.3, 0.4), (-0.2, 0.9), (0.0, 0.0)):
            expected = self.brute_force(data, beta, phi)
            assert nb_pseudo_loglik(data, [beta], phi) == pytest.approx(expected, rel=1e-10)

    def test_weighted_brute_force(self):
        data = self.make_data()

        class Series:
            def __init__(self, values):
                self.values = np.asarray(values, dtype=float)

        weights = {
            "s0": Series(np.linspace(1.0, 1.5, 110)),
            "s1": Series(np.linspace(1.0, 0.8, 135)),
            "s2": Series(np.full(80, 1.1)),
            "s3": Series(np.linspace(0.9, 1.3, 115)),
        }
        expected = self.brute_force(data, 0.25, 0.5, weights)
        got = nb_pseudo_loglik(data, [0.25], 0.5, weights=weights)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_phi_zero_equals_partial_likelihood_plus_baseline(self, small_trial):
        subjects = [s for s in small_trial.observed if s.switch_time is None]
        data = NBData.from_subjects(subjects, censor_at_switch=False)
        rows = expand_counting_process(subjects, censor_at_switch=False)
        beta = np.array([-0.3, 0.1, 0.002, 0.05])
        base = breslow_baseline(rows, beta)
        # Andersen-Gill log likelihood with the Breslow baseline plugged in
        eta = {}
        for r in rows:
            eta[r.id] = float(np.dot(r.covariates, beta))
        event_part = 0.0
        for r in rows:
            if r.status:
                k = np.searchsorted(base.jump_times, r.stop)
                event_part += eta[r.id] + math.log(base.jumps[k])
        cum = {}
        for s in subjects:
            covered = base.jump_times <= s.tau + 1e-12
            cum[s.id] = float(base.jumps[covered].sum())
        integral = sum(math.exp(eta[s.id]) * cum[s.id] for s in subjects)
        expected = event_part - integral
        got = nb_pseudo_loglik(data, beta, 0.0)
        assert got == pytest.approx(expected, abs=1e-10 * max(1.0, abs(expected)))

    def test_single_subject_first_event_factor(self):
        data = make_nbdata([1], [2.0], [[0.0]], event_times=[np.array([1.0])])
        # sole subject: delta = 1/r, mu(t-) = 0, so the event term is just eta
        got = nb_pseudo_loglik(data, [0.7], 0.9)
        assert got == pytest.approx(self.brute_force(data, 0.7, 0.9), rel=1e-12)

    def test_gradient_spot_check(self):
        data = self.make_data()
        rng = np.random.default_rng(7)
        for _ in range(5):
            beta = rng.normal(0, 0.4)
            phi = float(rng.uniform(0.05, 1.0))
            grad = nb_pseudo_loglik_grad(data, [beta], phi)
            for k in range(2):
                h = 1e-6 * max(1.0, abs((beta, phi)[k]))
                db, dp = (h, 0.0) if k == 0 else (0.0, h)
                up = nb_pseudo_loglik(data, [beta + db], phi + dp)
                dn = nb_pseudo_loglik(data, [beta - db], phi - dp)
                num = (up - dn) / (2 * h)
                assert grad[k] == pytest.approx(num, rel=1e-4, abs=1e-7)

    def test_negative_phi_rejected(self):
        with pytest.raises(ValueError):
            nb_pseudo_loglik(self.make_data(), [0.0], -0.1)


class TestFitNbSemiparam:
    def test_collapses_to_lwyy_without_overdispersion(self):
        # one event per subject at distinct times: profile peaks at phi = 0
        rng = np.random.default_rng(9)
        ids = [f"s{i}" for i in range(30)]
        times = np.sort(rng.uniform(0.2, 1.8, 30))
        data = NBData(
            ids=ids,
            counts=np.ones(30),
            tau_used=np.full(30, 2.0),
            X=(np.arange(30) % 2).reshape(-1, 1).astype(float),
            event_times=[np.array([t]) for t in times],
        )
        fit = fit_nb_semiparam(data)
        assert fit.phi == 0.0
        rows = []
        from recurrent_ipw.data import CountingProcessRow

        for i, t in enumerate(times):
            x = (float(i % 2),)
            rows.append(CountingProcessRow(ids[i], 0.0, t, 1, x))
            rows.append(CountingProcessRow(ids[i], t, 2.0, 0, x))
        lwyy = fit_lwyy(rows)
        assert fit.beta[0] == pytest.approx(lwyy.beta[0], abs=1e-6)

    def test_five_subject_grid_oracle(self):
        data = make_nbdata(
            [3, 1, 0, 2, 4],
            [2.0, 2.5, 1.5, 2.2, 2.8],
            [[1.0], [0.0], [1.0], [0.0], [1.0]],
            event_times=[
                np.array([0.3, 0.9, 1.6]),
                np.array([0.5]),
                np.array([]),
                np.array([1.2, 2.0]),
                np.array([0.4, 1.0, 1.9, 2.5]),
            ],
        )
        fit = fit_nb_semiparam(data)
        assert fit.converged
        betas = np.linspace(fit.beta[0] - 0.02, fit.beta[0] + 0.02, 17)
        phis = np.linspace(max(fit.phi - 0.02, 0.0), fit.phi + 0.02, 17)
        best = None
        for b, p in itertools.product(betas, phis):
            val = nb_pseudo_loglik(data, [b], p)
            if best is None or val > best[0]:
                best = (val, b, p)
        assert fit.beta[0] == pytest.approx(best[1], abs=1e-3)
        assert fit.phi == pytest.approx(best[2], abs=1e-3)

    def test_semiparam_variance_is_bootstrap_only(self):
        data = make_nbdata(
            [1, 2], [2.0, 2.0], [[0.0], [1.0]],
            event_times=[np.array([0.5]), np.array([0.7, 1.5])],
        )
        fit = fit_nb_semiparam(data)
        assert fit.variance is None
