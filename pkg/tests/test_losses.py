import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import gaussian_moment_batch, kde_l2_by_quadrature, moment_loss_bruteforce
from sfml.losses import (
    LossWeights,
    batch_loss_and_grads,
    default_bandwidth,
    distributional_loss,
    kde_l2_distance,
    kde_l2_distance_and_grad,
    kde_l2_squared_and_grad,
    moment_loss_1d,
    moment_loss_1d_and_grad,
    moment_loss_nd,
    moment_loss_nd_and_grad,
    mse_loss,
    mse_loss_and_grad,
    total_loss,
)

# frozen from the plain-python evaluator in _oracles.moment_loss_bruteforce
TWO_POINT_MOMENT_LOSS = 4 / 3 + 196 / 15
CONSTANT_MOMENT_LOSS = 19.0


def numeric_grad(f, z, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        g[idx] = (f(zp) - f(zm)) / (2 * eps)
    return g


class TestMse:
    def test_equal_is_zero(self):
        x = np.arange(6.0).reshape(3, 2)
        assert mse_loss(x, x) == 0.0

    def test_single(self):
        assert mse_loss([[0.0]], [[2.0]]) == 4.0

    def test_two_dim_sum_then_mean(self):
        assert mse_loss([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))

    def test_zero_gradient_at_target(self):
        x = np.ones((4, 2))
        assert not np.any(mse_loss_and_grad(x, x)[1])


class TestKde:
    def test_single_sample_matches_quadrature(self):
        z = np.zeros((1, 1))
        assert kde_l2_distance(z, 1.0) == pytest.approx(kde_l2_by_quadrature(z, 1.0), rel=1e-10)

    def test_single_sample_closed_form_value(self):
        # ||N(0, h^2) - N(0, 1)||^2 with h = 1 is zero
        assert kde_l2_squared_and_grad(np.zeros((1, 1)), 1.0)[0] == pytest.approx(0.0, abs=1e-15)

    def test_eight_samples_against_quadrature(self):
        z = np.random.default_rng(0).normal(size=(8, 1))
        sq = kde_l2_distance(z, 0.5, squared=True)
        assert sq == pytest.approx(kde_l2_by_quadrature(z, 0.5) ** 2, rel=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_instances_against_quadrature(self, seed):
        rng = np.random.default_rng(100 + seed)
        k = 1 + seed % 2
        z = rng.normal(scale=rng.uniform(0.3, 2), size=(int(rng.integers(1, 33)), k))
        h = rng.uniform(0.1, 2)
        assert kde_l2_distance(z, h) == pytest.approx(kde_l2_by_quadrature(z, h), rel=1e-6)

    @pytest.mark.parametrize("h", [0.0, -1.0])
    def test_bad_bandwidth(self, h):
        with pytest.raises(ValueError):
            kde_l2_distance(np.zeros((3, 1)), h)

    @pytest.mark.parametrize("squared", [False, True])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_gradient(self, squared, k):
        z = np.random.default_rng(k).normal(size=(7, k))
        _, g = kde_l2_distance_and_grad(z, 0.6, squared)
        np.testing.assert_allclose(g, numeric_grad(lambda a: kde_l2_distance(a, 0.6, squared), z), rtol=1e-6, atol=1e-9)

    def test_squared_is_square_of_norm(self):
        z = np.random.default_rng(3).normal(size=(10, 2))
        assert kde_l2_distance(z, 0.4, squared=True) == pytest.approx(kde_l2_distance(z, 0.4) ** 2, rel=1e-12)

    def test_default_bandwidth(self):
        assert default_bandwidth(2000, 1) == pytest.approx(2000 ** (-0.2))

    def test_distance_shrinks_for_gaussian_batches(self):
        rng = np.random.default_rng(0)
        small = kde_l2_distance(rng.normal(size=(2000, 1)), default_bandwidth(2000, 1))
        shifted = kde_l2_distance(rng.normal(size=(2000, 1)) + 1.0, default_bandwidth(2000, 1))
        assert small < 0.05 < shifted


class TestMoment1d:
    def test_brute_force_oracle_values(self):
        assert moment_loss_bruteforce([-1.0, 1.0]) == pytest.approx(TWO_POINT_MOMENT_LOSS, abs=1e-12)
        assert moment_loss_bruteforce([0.0] * 4) == CONSTANT_MOMENT_LOSS

    def test_two_point_batch(self):
        assert abs(moment_loss_1d(np.array([-1.0, 1.0])) - TWO_POINT_MOMENT_LOSS) < 1e-12

    def test_constant_batch(self):
        assert abs(moment_loss_1d(np.zeros(4)) - CONSTANT_MOMENT_LOSS) < 1e-12

    def test_nonzero_constant_adds_squared_mean(self):
        assert moment_loss_bruteforce([0.3] * 5) == pytest.approx(CONSTANT_MOMENT_LOSS + 0.09, abs=1e-12)
        assert abs(moment_loss_1d(np.full(5, 0.3)) - (CONSTANT_MOMENT_LOSS + 0.09)) < 1e-12

    def test_exact_gaussian_moments_give_zero(self):
        assert moment_loss_1d(gaussian_moment_batch()) < 1e-12

    def test_matches_brute_force_on_random_batch(self):
        x = np.random.default_rng(5).normal(size=17)
        assert moment_loss_1d(x) == pytest.approx(moment_loss_bruteforce(list(x)), rel=1e-12)

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            moment_loss_1d(np.zeros(1))

    def test_gradient(self):
        z = np.random.default_rng(6).normal(size=(9, 1))
        _, g = moment_loss_1d_and_grad(z)
        np.testing.assert_allclose(g, numeric_grad(moment_loss_1d, z), rtol=1e-6, atol=1e-8)


class TestMomentNd:
    def test_equals_1d_for_one_column(self):
        z = np.random.default_rng(7).normal(size=(12, 1))
        assert moment_loss_nd(z) == moment_loss_1d(z)

    def test_perfect_correlation_adds_nu(self):
        x = np.random.default_rng(8).normal(size=30)
        z = np.stack([x, x], axis=1)
        assert moment_loss_nd(z) == pytest.approx(2 * moment_loss_1d(x) + 0.1, rel=1e-12)

    def test_independent_columns_small_correlation(self):
        z = np.random.default_rng(9).normal(size=(10**4, 2))
        rho = np.corrcoef(z.T)[0, 1]
        assert abs(rho) < 0.05
        extra = moment_loss_nd(z) - moment_loss_1d(z[:, :1]) - moment_loss_1d(z[:, 1:])
        assert extra == pytest.approx(0.1 * rho**2, rel=1e-6)

    def test_exact_moments_uncorrelated_give_zero(self):
        x = gaussian_moment_batch()
        z = np.stack([np.concatenate([x, x]), np.concatenate([x, -x])], axis=1)
        assert moment_loss_nd(z) < 1e-12

    def test_correlation_weight_averages_pairs(self):
        x = np.random.default_rng(10).normal(size=25)
        z = np.stack([x, x, x], axis=1)
        # three pairs, each with rho = 1: nu / 3 * 3
        assert moment_loss_nd(z) == pytest.approx(3 * moment_loss_1d(x) + 0.1, rel=1e-12)

    def test_zero_variance_names_dimension(self):
        z = np.stack([np.random.default_rng(0).normal(size=5), np.zeros(5)], axis=1)
        with pytest.raises(ValueError, match="dimension 1"):
            moment_loss_nd(z)

    @pytest.mark.parametrize("k", [2, 3])
    def test_gradient(self, k):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(11, k)) @ rng.normal(size=(k, k))
        _, g = moment_loss_nd_and_grad(z)
        np.testing.assert_allclose(g, numeric_grad(moment_loss_nd, z), rtol=1e-6, atol=1e-8)


class TestComposite:
    def test_tau_to_zero_is_kde(self):
        z = np.random.default_rng(12).normal(size=(8, 1))
        w = LossWeights(tau=1e-300, bandwidth=0.5)
        assert distributional_loss(z, w) == pytest.approx(kde_l2_distance(z, 0.5), rel=1e-12)

    def test_sum_of_parts(self):
        z = np.random.default_rng(13).normal(size=(8, 1))
        w = LossWeights(tau=1.0, bandwidth=0.5)
        expected = kde_l2_distance(z, 0.5) + moment_loss_1d(z)
        assert distributional_loss(z, w) == pytest.approx(expected, rel=1e-14)

    def test_batch_total(self):
        rng = np.random.default_rng(14)
        z, p, t = rng.normal(size=(8, 1)), rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        w = LossWeights(lam=0.7, tau=2.0, bandwidth=0.5)
        total, _, _, parts = batch_loss_and_grads(z, p, t, w)
        assert total == pytest.approx(mse_loss(p, t) + 0.7 * (parts["kde"] + 2.0 * parts["moment"]), rel=1e-14)

    def test_lambda_to_zero_is_mse(self):
        rng = np.random.default_rng(15)
        batches = [(rng.normal(size=(6, 1)), rng.normal(size=(6, 1)), rng.normal(size=(6, 1))) for _ in range(3)]
        w = LossWeights(lam=1e-300)
        assert total_loss(batches, w) == pytest.approx(np.mean([mse_loss(p, t) for _, p, t in batches]), rel=1e-12)

    def test_mean_over_batches(self):
        rng = np.random.default_rng(16)
        batches = [(rng.normal(size=(6, 1)), rng.normal(size=(6, 1)), rng.normal(size=(6, 1))) for _ in range(2)]
        w = LossWeights()
        a, b = (batch_loss_and_grads(*bt, w)[0] for bt in batches)
        assert total_loss(batches, w) == pytest.approx((a + b) / 2, rel=1e-14)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lam=0.0)
        with pytest.raises(ValueError):
            LossWeights(c=(1, 1, 1))


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(z=arrays(np.float64, st.tuples(st.integers(3, 20), st.integers(1, 3)), elements=finite), seed=st.integers(0, 2**31))
def test_batch_losses_permutation_invariant(z, seed):
    if np.any(z.std(axis=0) < 1e-3):
        return
    perm = np.random.default_rng(seed).permutation(z.shape[0])
    w = LossWeights(bandwidth=0.5)
    assert kde_l2_distance(z[perm], 0.5) == pytest.approx(kde_l2_distance(z, 0.5), rel=1e-9, abs=1e-12)
    assert moment_loss_nd(z[perm]) == pytest.approx(moment_loss_nd(z), rel=1e-9, abs=1e-12)
    t = z[::-1].copy()
    a = batch_loss_and_grads(z, z, t, w)[0]
    b = batch_loss_and_grads(z[perm], z[perm], t[perm], w)[0]
    assert b == pytest.approx(a, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(z=arrays(np.float64, st.tuples(st.integers(1, 15), st.integers(1, 2)), elements=finite), h=st.floats(0.1, 2))
def test_kde_distance_nonnegative_and_shift_sensitive(z, h):
    d = kde_l2_distance(z, h)
    assert d >= 0 and math.isfinite(d)
    assert kde_l2_distance(z + 20.0, h) > 0.1
