import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_multi_ctx, random_single_ctx, relative_error
from wvo.errors import DegenerateContextError, UsageError
from wvo.models import BetaBernoulli, NormalNoninformative, ObservationSet
from wvo.objective import (
    MultiLevelContext,
    SingleLevelContext,
    build_single_context,
    canonical_row_sums,
    grad_k1,
    grad_multi,
    grad_single,
    load_context,
    logsumexp,
    objective_k1,
    objective_multi,
    objective_single,
    objective_single_terms,
    value_and_grad_multi,
)
from wvo.sampler import PosteriorSamples


class TestLogsumexp:
    def test_pair_of_zeros(self):
        assert logsumexp([0.0, 0.0]) == pytest.approx(np.log(2), abs=1e-15)

    def test_minus_inf_entry_dropped(self):
        assert logsumexp([-np.inf, 0.0]) == 0.0

    def test_no_overflow(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + np.log(2), rel=1e-15)

    def test_all_minus_inf(self):
        assert logsumexp([-np.inf, -np.inf]) == -np.inf

    @pytest.mark.parametrize("bad", [[], [np.nan, 0.0], [np.inf, 0.0]])
    def test_rejects(self, bad):
        with pytest.raises(UsageError):
            logsumexp(bad)

    def test_axis(self, rng):
        x = rng.normal(size=(4, 6))
        np.testing.assert_allclose(logsumexp(x, axis=1), np.log(np.exp(x).sum(axis=1)), rtol=1e-13)

    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=30), st.floats(-1e3, 1e3))
    @settings(max_examples=100, deadline=None)
    def test_shift_equivariance(self, xs, c):
        assert logsumexp(np.array(xs) + c) == pytest.approx(logsumexp(xs) + c, rel=1e-12, abs=1e-9)


class TestSingleLevelContext:
    def test_identity_rows_sum_to_base(self):
        obs = ObservationSet([-0.56, 0.81, -0.40, 1.10, -0.8])
        fam = NormalNoninformative()
        samples = PosteriorSamples(np.random.default_rng(0).normal(size=(30, 2)), fam.latent_names)
        ctx = build_single_context(fam, samples, obs, obs)
        np.testing.assert_allclose(ctx.L.sum(axis=1), ctx.base, rtol=1e-14)
        assert objective_single_terms(ctx, np.ones(5))[1] == np.log(30)

    def test_bernoulli_entry(self):
        fam = BetaBernoulli()
        samples = PosteriorSamples([[0.0]], fam.latent_names)  # logit 0 = theta 0.5
        ctx = build_single_context(fam, samples, ObservationSet([1.0]), ObservationSet([1.0, 0.0]))
        np.testing.assert_allclose(ctx.L, [[np.log(0.5), np.log(0.5)]], rtol=1e-15)

    def test_normal_entry(self):
        fam = NormalNoninformative()
        samples = PosteriorSamples([[0.0, 0.0]], fam.latent_names)
        ctx = build_single_context(fam, samples, ObservationSet([1.0]), ObservationSet([0.0]))
        assert ctx.L[0, 0] == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-15)

    def test_rejects_nan(self):
        with pytest.raises(UsageError):
            SingleLevelContext([[np.nan]], [0.0], 1.0)

    def test_frozen(self, rng):
        ctx = random_single_ctx(rng)
        with pytest.raises(ValueError):
            ctx.L[0, 0] = 1.0

    def test_save_load_roundtrip(self, rng, tmp_path):
        ctx = random_single_ctx(rng)
        ctx.save(tmp_path)
        again = load_context(tmp_path)
        assert again.digest() == ctx.digest()


class TestObjectiveSingle:
    def test_hand_value(self):
        ctx = SingleLevelContext(np.full((2, 2), np.log(0.5)), [np.log(0.25)] * 2, 2.0)
        assert objective_single(ctx, [1, 1]) == pytest.approx(-2.0794415416798357, rel=1e-14)

    def test_identity_second_term_is_log_s(self, rng):
        L = rng.normal(size=(50, 7))
        ctx = SingleLevelContext(L, canonical_row_sums(L), 7.0)
        first, second = objective_single_terms(ctx, np.ones(7))
        assert second == np.log(50)
        assert first == pytest.approx(ctx.base.mean(), rel=1e-14)

    def test_constant_rows_zero_gradient(self, rng):
        L = np.tile(rng.normal(size=5), (20, 1))
        ctx = SingleLevelContext(L, rng.normal(size=20), 5.0)
        np.testing.assert_allclose(grad_single(ctx, rng.uniform(0.1, 2, 5)), 0.0, atol=1e-14)

    def test_single_sample_zero_gradient(self, rng):
        ctx = SingleLevelContext(rng.normal(size=(1, 4)), [0.3], 4.0)
        np.testing.assert_allclose(grad_single(ctx, np.ones(4)), 0.0, atol=1e-15)

    def test_bernoulli_known_optimum_beats_uniform(self):
        theta = np.random.default_rng(1).beta(9, 5, size=5000)
        yhat = np.array([0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 1], dtype=float)
        L = np.where(yhat == 1, np.log(theta)[:, None], np.log1p(-theta)[:, None])
        base = 8 * np.log(theta) + 4 * np.log1p(-theta)
        ctx = SingleLevelContext(L, base, 12.0)
        w_opt = np.where(yhat == 1, 8 / 5, 4 / 7)
        assert objective_single(ctx, w_opt) >= objective_single(ctx, np.ones(12))

    def test_zero_weight_ignores_impossible_observation(self):
        L = np.array([[-np.inf, -1.0], [-2.0, -1.0]])
        ctx = SingleLevelContext(L, [-1.0, -1.0], 1.0)
        assert np.isfinite(objective_single(ctx, [0.0, 1.0]))

    def test_degenerate_context(self):
        ctx = SingleLevelContext(np.full((3, 1), -np.inf), np.zeros(3), 1.0)
        with pytest.raises(DegenerateContextError):
            grad_single(ctx, [1.0])

    def test_rejects_negative_weights(self, rng):
        with pytest.raises(UsageError):
            objective_single(random_single_ctx(rng), [-1, 1, 1, 1, 1])

    def test_gradient_matches_finite_differences(self, rng):
        ctx = random_single_ctx(rng)
        w = rng.uniform(0.2, 2.0, size=5)
        fd = central_diff(lambda u: objective_single(ctx, u), w)
        assert relative_error(grad_single(ctx, w), fd).max() < 1e-5


class TestObjectiveK1:
    def test_single_column(self, rng):
        Lz = rng.normal(size=(30, 1, 1))
        base = rng.normal(size=30)
        ctx = MultiLevelContext(Lz, base, 1.0)
        want = Lz[:, 0, 0].mean() - logsumexp(Lz[:, 0, 0] - base)
        assert objective_k1(ctx, [1.0]) == pytest.approx(want, rel=1e-14)

    def test_constant_across_columns(self, rng):
        col = rng.normal(size=(25, 1, 1))
        ctx = MultiLevelContext(np.repeat(col, 4, axis=2), rng.normal(size=25), 1.0)
        a = objective_k1(ctx, [0.25] * 4)
        b = objective_k1(ctx, [0.7, 0.1, 0.1, 0.1])
        assert a == pytest.approx(b, rel=1e-13)
        g = grad_k1(ctx, [0.7, 0.1, 0.1, 0.1])
        np.testing.assert_allclose(g, g[0], rtol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        ctx = random_multi_ctx(rng, K=1, M=4, budget=1.0)
        w = rng.dirichlet(np.ones(4))
        fd = central_diff(lambda u: objective_k1(ctx, u), w)
        assert relative_error(grad_k1(ctx, w), fd).max() < 1e-5

    def test_needs_one_group(self, rng):
        with pytest.raises(UsageError):
            objective_k1(random_multi_ctx(rng, K=2), [0.5] * 4)


class TestObjectiveMulti:
    def test_reduces_to_k1(self, rng):
        ctx = random_multi_ctx(rng, K=1, M=5, budget=1.0)
        w = rng.dirichlet(np.ones(5))
        assert objective_multi(ctx, [1.0], w[None, :]) == objective_k1(ctx, w)

    def test_identical_groups_depend_on_total_v(self, rng):
        one = rng.normal(size=(20, 1, 4))
        ctx = MultiLevelContext(np.repeat(one, 3, axis=1), rng.normal(size=20), 3.0)
        W = np.tile(rng.dirichlet(np.ones(4)), (3, 1))
        a = objective_multi(ctx, [1.0, 1.0, 1.0], W)
        b = objective_multi(ctx, [2.5, 0.2, 0.3], W)
        assert a == pytest.approx(b, rel=1e-13)
        gv, _ = grad_multi(ctx, [2.5, 0.2, 0.3], W)
        np.testing.assert_allclose(gv, gv[0], rtol=1e-12)

    def test_list_of_matrices(self, rng):
        mats = [rng.normal(size=(10, 3)) for _ in range(2)]
        a = MultiLevelContext(mats, np.zeros(10), 2.0)
        b = MultiLevelContext(np.stack(mats, axis=1), np.zeros(10), 2.0)
        assert a.digest() == b.digest()

    def test_zero_mixture_weight_on_impossible_value(self):
        Lz = np.array([[[-np.inf, -1.0]], [[-np.inf, -2.0]]])
        ctx = MultiLevelContext(Lz, [-1.0, -1.0], 1.0)
        assert np.isfinite(objective_multi(ctx, [1.0], [[0.0, 1.0]]))

    def test_gradient_matches_finite_differences(self, rng):
        ctx = random_multi_ctx(rng)
        v = rng.uniform(0.3, 2.0, size=3)
        W = rng.dirichlet(np.ones(4), size=3)
        gv, gW = grad_multi(ctx, v, W)
        assert relative_error(gv, central_diff(lambda u: objective_multi(ctx, u, W), v)).max() < 1e-5
        assert relative_error(gW, central_diff(lambda u: objective_multi(ctx, v, u), W)).max() < 1e-5

    def test_value_matches_plain_formula(self, rng):
        ctx = random_multi_ctx(rng)
        v = rng.uniform(0.3, 2.0, size=3)
        W = rng.dirichlet(np.ones(4), size=3)
        m = np.log((np.exp(ctx.Lz) * W[None]).sum(axis=2))
        a = m @ v
        want = a.mean() - np.log(np.exp(a - ctx.base).sum())
        assert value_and_grad_multi(ctx, v, W)[0] == pytest.approx(want, rel=1e-12)


class TestPermutationEquivariance:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_single(self, seed):
        rng = np.random.default_rng(seed)
        ctx = random_single_ctx(rng, S=15, N=6)
        w = rng.uniform(0, 2, size=6)
        p = rng.permutation(6)
        permuted = SingleLevelContext(ctx.L[:, p], ctx.base, ctx.budget)
        assert objective_single(permuted, w[p]) == objective_single(ctx, w)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_multi_within_group(self, seed):
        rng = np.random.default_rng(seed)
        ctx = random_multi_ctx(rng, S=15, K=2, M=5)
        v = rng.uniform(0.1, 2, size=2)
        W = rng.dirichlet(np.ones(5), size=2)
        p = rng.permutation(5)
        permuted = MultiLevelContext(ctx.Lz[:, :, p], ctx.base, ctx.budget)
        assert objective_multi(permuted, v, W[:, p]) == objective_multi(ctx, v, W)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_multi_across_groups(self, seed):
        rng = np.random.default_rng(seed)
        ctx = random_multi_ctx(rng, S=15, K=4, M=3)
        v = rng.uniform(0.1, 2, size=4)
        W = rng.dirichlet(np.ones(3), size=4)
        p = rng.permutation(4)
        q = rng.permutation(3)
        permuted = MultiLevelContext(ctx.Lz[:, p][:, :, q], ctx.base, ctx.budget)
        assert objective_multi(permuted, v[p], W[p][:, q]) == objective_multi(ctx, v, W)
        gv, gW = grad_multi(ctx, v, W)
        pv, pW = grad_multi(permuted, v[p], W[p][:, q])
        np.testing.assert_allclose(pv, gv[p], rtol=1e-12)
        np.testing.assert_allclose(pW, gW[p][:, q], rtol=1e-12)
