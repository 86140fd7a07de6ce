import numpy as np
import pytest
from scipy import integrate, stats

from wvo.diagnostics import (
    MebPrior,
    ReconditionedModel,
    Thresholds,
    compare_posteriors,
    conjugate_beta_bernoulli_posterior,
    meb_fit,
    meb_log_prior,
    recondition,
    uniform_weights,
)
from wvo.errors import DegenerateFitError, UsageError
from wvo.models import BetaBernoulli, EightSchools, NormalNoninformative, ObservationSet, load_data
from wvo.optimize import WeightAssignment
from wvo.sampler import PosteriorSamples, SamplerConfig, run_mh
from wvo.virtual import VirtualObservationSet

Y_HAT = np.array([0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 1], float)


def single_vobs(values):
    values = np.asarray(values, float)
    return VirtualObservationSet("single", values, np.zeros(values.size, dtype=int))


class TestRecondition:
    def test_identity_log_joint(self, rng):
        fam = NormalNoninformative()
        obs = load_data(fam)
        model = recondition(fam, VirtualObservationSet.from_observations(obs), WeightAssignment(np.ones(10)))
        x = rng.normal(0.0, 1.0, size=(100, 2))
        original = fam.log_prior(x) + fam.total_obs_loglik(obs, x)
        np.testing.assert_allclose(model.log_joint(x), original, rtol=1e-12)

    def test_evidence_linear_in_weights(self, rng):
        fam = NormalNoninformative()
        vobs = single_vobs(rng.normal(size=6))
        w1, w2 = rng.uniform(0, 2, 6), rng.uniform(0, 2, 6)
        x = rng.normal(size=(20, 2))
        ev = lambda w: recondition(fam, vobs, WeightAssignment(w)).evidence(x)  # noqa: E731
        np.testing.assert_allclose(ev(w1 + w2), ev(w1) + ev(w2), rtol=1e-12)

    def test_reference_weights_give_beta_9_5(self, rng):
        fam = BetaBernoulli()
        w = np.where(Y_HAT == 1, 8 / 5, 4 / 7)
        model = recondition(fam, single_vobs(Y_HAT), WeightAssignment(w), budget=12)
        theta = rng.uniform(0.01, 0.99, size=50)
        u = np.log(theta / (1 - theta))[:, None]
        want = stats.beta.logpdf(theta, 9, 5) + np.log(theta * (1 - theta))
        diff = model.log_joint(u) - want
        np.testing.assert_allclose(diff, diff[0], atol=1e-12)

    def test_reference_weights_sampled(self):
        fam = BetaBernoulli()
        w = np.where(Y_HAT == 1, 8 / 5, 4 / 7)
        model = recondition(fam, single_vobs(Y_HAT), WeightAssignment(w))
        theta = run_mh(model, None, SamplerConfig(seed=4)).natural(fam).values[:, 0]
        assert stats.kstest(theta, stats.beta(9, 5).cdf).statistic < 0.03

    def test_one_virtual_group(self, rng):
        fam = EightSchools()
        vobs = VirtualObservationSet("multi", [[1.7]], [[0]])
        model = recondition(fam, vobs, WeightAssignment([[1.0]], [1.0]))
        x = rng.normal(size=(10, 2))
        np.testing.assert_allclose(model.evidence(x), fam.log_group_prior(1.7, x), rtol=1e-13)

    def test_multi_evidence(self, rng):
        fam = EightSchools()
        values = rng.normal(size=(2, 3))
        vobs = VirtualObservationSet("multi", values, np.zeros((2, 3), dtype=int))
        W = rng.dirichlet(np.ones(3), size=2)
        v = np.array([0.5, 1.5])
        x = np.array([0.2, 0.1])
        want = sum(v[k] * np.log(sum(W[k, i] * stats.norm.pdf(values[k, i], 0.2, np.exp(0.1))
                                     for i in range(3))) for k in range(2))
        got = recondition(fam, vobs, WeightAssignment(W, v)).evidence(x)
        assert got == pytest.approx(want, rel=1e-12)

    def test_budget_checked(self):
        with pytest.raises(UsageError):
            ReconditionedModel(BetaBernoulli(), single_vobs([1.0, 0.0]), WeightAssignment([1.0, 1.0]), budget=3)

    def test_level_mismatch(self):
        with pytest.raises(UsageError):
            recondition(EightSchools(), single_vobs([1.0]), WeightAssignment([1.0]))

    def test_rows_must_sum_to_one(self):
        vobs = VirtualObservationSet("multi", [[1.0, 2.0]], [[0, 0]])
        with pytest.raises(UsageError):
            recondition(EightSchools(), vobs, WeightAssignment([[0.5, 0.6]], [1.0]))

    def test_uniform_weights(self):
        vobs = VirtualObservationSet("multi", np.zeros((4, 5)), np.zeros((4, 5), dtype=int))
        w = uniform_weights(vobs, 8.0)
        np.testing.assert_array_equal(w.v, 2.0)
        np.testing.assert_array_equal(w.w, 0.2)
        np.testing.assert_array_equal(uniform_weights(single_vobs(np.zeros(3)), 12.0).w, 4.0)


class TestConjugate:
    def test_ten_observations(self):
        assert conjugate_beta_bernoulli_posterior(1, 1, [1] * 6 + [0] * 4) == (7, 5)

    def test_bundled_data(self):
        assert conjugate_beta_bernoulli_posterior(1, 1, load_data(BetaBernoulli()).values) == (9, 5)

    def test_zero_budget(self):
        assert conjugate_beta_bernoulli_posterior(2, 3, [1.0, 0.0], [0.0, 0.0]) == (2, 3)

    def test_weighted(self):
        a, b = conjugate_beta_bernoulli_posterior(1, 1, Y_HAT, np.where(Y_HAT == 1, 8 / 5, 4 / 7))
        assert a == pytest.approx(9) and b == pytest.approx(5)

    def test_rejects_non_binary(self):
        with pytest.raises(UsageError):
            conjugate_beta_bernoulli_posterior(1, 1, [0.5])


class TestCompare:
    def test_self(self, rng):
        a = PosteriorSamples(rng.normal(size=(500, 2)), ("a", "b"))
        c = compare_posteriors(a, a)
        np.testing.assert_array_equal(c.mean_diff, 0.0)
        np.testing.assert_array_equal(c.std_ratio, 1.0)
        np.testing.assert_array_equal(c.ks, 0.0)
        assert c.all_passed()

    def test_shift(self, rng):
        x = rng.normal(size=(1000, 1))
        x = (x - x.mean()) / x.std(ddof=1)
        c = compare_posteriors(PosteriorSamples(x, ("a",)), PosteriorSamples(x + 1, ("a",)))
        assert c.mean_diff[0] == pytest.approx(1.0, rel=1e-12)
        assert not c.all_passed()

    def test_ks_between_independent_beta_draws(self, rng):
        a = PosteriorSamples(rng.beta(9, 5, size=(5000, 1)), ("t",))
        b = PosteriorSamples(rng.beta(9, 5, size=(5000, 1)), ("t",))
        assert compare_posteriors(a, b).ks[0] < 0.039

    def test_names_must_match(self, rng):
        with pytest.raises(UsageError):
            compare_posteriors(PosteriorSamples(np.zeros((3, 1)), ("a",)), PosteriorSamples(np.zeros((3, 1)), ("b",)))

    def test_thresholds(self):
        t = Thresholds()
        assert (t.max_mean_diff, t.min_std_ratio, t.max_std_ratio, t.max_ks) == (0.25, 0.8, 1.25, 0.08)


class TestMeb:
    def test_normal_fit(self, rng):
        x = rng.normal(size=1000)
        x = (x - x.mean()) / x.std()
        fit = meb_fit(PosteriorSamples(x[:, None], ("mu",)), {"mu": "normal"})["mu"]
        assert fit.kind == "normal"
        np.testing.assert_allclose(fit.params, (0.0, 1.0), atol=1e-12)

    def test_gamma_moments(self):
        # values with mean 2 and population variance 2
        x = np.array([2 - np.sqrt(2), 2 + np.sqrt(2)])
        fit = meb_fit(PosteriorSamples(x[:, None], ("tau",)), {"tau": "gamma"})["tau"]
        np.testing.assert_allclose(fit.params, (2.0, 1.0), rtol=1e-12)
        assert fit.mean == pytest.approx(2.0) and fit.var == pytest.approx(2.0)

    def test_constant_samples(self):
        with pytest.raises(DegenerateFitError):
            meb_fit(PosteriorSamples(np.ones((10, 1)), ("mu",)), {"mu": "normal"})

    def test_unknown_kind(self, rng):
        with pytest.raises(UsageError):
            meb_fit(PosteriorSamples(rng.normal(size=(10, 1)), ("mu",)), {"mu": "cauchy"})

    def test_log_prior_normalized_in_internal_coordinates(self):
        fam = EightSchools()
        fits = {"mu": MebPrior("normal", (1.0, 2.0)), "tau": MebPrior("gamma", (2.0, 0.5))}
        lp = meb_log_prior(fam, fits)
        total = integrate.dblquad(lambda lt, mu: np.exp(lp(np.array([mu, lt]))), -15, 17, -12, 5)[0]
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_missing_fit(self):
        with pytest.raises(UsageError):
            meb_log_prior(EightSchools(), {"mu": MebPrior("normal", (0.0, 1.0))})
