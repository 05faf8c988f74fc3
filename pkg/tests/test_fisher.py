import numpy as np
import pytest

from fvnet.fisher import (FisherVector, FvAccumulator, accumulate,
                          fisher_vector_dim, fv_backward, fv_forward,
                          fv_from_stats, l2_normalize, l2_normalize_backward,
                          merge, normalize_fv, power_normalize,
                          power_normalize_backward)
from fvnet.gmm import GmmParams, em_fit, mixture_weights, posteriors


def random_params(rng, k, n_dims):
    return GmmParams(rng.normal(size=k), rng.normal(size=(k, n_dims)),
                     rng.normal(0.0, 0.4, size=(k, n_dims)))


def accumulate_naive(x, gamma):
    """Per-descriptor summation loop."""
    t, n_dims = x.shape
    k = gamma.shape[1]
    acc = FvAccumulator.empty(k, n_dims)
    s0, s1, s2 = acc.s0.copy(), acc.s1.copy(), acc.s2.copy()
    for i in range(t):
        for j in range(k):
            s0[j] += gamma[i, j]
            s1[j] += gamma[i, j] * x[i]
            s2[j] += gamma[i, j] * x[i] ** 2
    return FvAccumulator(s0, s1, s2, t)


class TestAccumulate:
    def test_empty_region_is_identity(self):
        rng = np.random.default_rng(0)
        params = random_params(rng, 2, 3)
        x = rng.normal(size=(4, 5, 3))
        gamma = posteriors(x, params)
        acc = FvAccumulator.empty(2, 3)
        out = accumulate(acc, x, gamma, region=(1, 1, 0, 2))
        np.testing.assert_array_equal(out.s0, acc.s0)
        np.testing.assert_array_equal(out.s1, acc.s1)
        assert out.count == 0

    def test_single_descriptor_single_component(self):
        x = np.array([[1.5, -2.0]])
        gamma = np.array([[1.0]])
        acc = accumulate(FvAccumulator.empty(1, 2), x, gamma)
        np.testing.assert_array_equal(acc.s0, [1.0])
        np.testing.assert_array_equal(acc.s1, x)
        np.testing.assert_array_equal(acc.s2, x ** 2)
        assert acc.count == 1

    def test_against_naive_loop(self):
        rng = np.random.default_rng(1)
        params = random_params(rng, 3, 4)
        x = rng.normal(size=(10, 4))
        gamma = posteriors(x, params)
        fast = accumulate(FvAccumulator.empty(3, 4), x, gamma)
        slow = accumulate_naive(x, gamma)
        assert np.max(np.abs(fast.s0 - slow.s0)) < 1e-12
        assert np.max(np.abs(fast.s1 - slow.s1)) < 1e-12
        assert np.max(np.abs(fast.s2 - slow.s2)) < 1e-12
        assert fast.count == slow.count

    def test_source_accumulator_untouched(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, 2, 2)
        x = rng.normal(size=(3, 2))
        acc = FvAccumulator.empty(2, 2)
        accumulate(acc, x, posteriors(x, params))
        assert not acc.s0.any() and acc.count == 0

    def test_mass_equals_count(self):
        rng = np.random.default_rng(3)
        params = random_params(rng, 4, 3)
        x = rng.normal(size=(6, 7, 3))
        acc = accumulate(FvAccumulator.empty(4, 3), x, posteriors(x, params))
        assert abs(acc.s0.sum() - acc.count) < 1e-9

    def test_misaligned_shapes(self):
        with pytest.raises(ValueError, match="aligned"):
            accumulate(FvAccumulator.empty(2, 3), np.zeros((4, 3)),
                       np.zeros((5, 2)))

    def test_region_crop_consistency_exact(self):
        # accumulating region R of the full tensors == accumulating crops
        rng = np.random.default_rng(4)
        params = random_params(rng, 3, 2)
        x = rng.normal(size=(6, 7, 2))
        gamma = posteriors(x, params)
        region = (1, 2, 3, 4)
        a = accumulate(FvAccumulator.empty(3, 2), x, gamma, region=region)
        r0, c0, rh, rw = region
        b = accumulate(FvAccumulator.empty(3, 2), x[r0:r0 + rh, c0:c0 + rw],
                       gamma[r0:r0 + rh, c0:c0 + rw])
        np.testing.assert_array_equal(a.s0, b.s0)
        np.testing.assert_array_equal(a.s1, b.s1)
        np.testing.assert_array_equal(a.s2, b.s2)
        assert a.count == b.count

    def test_region_out_of_range(self):
        with pytest.raises(ValueError, match="region"):
            accumulate(FvAccumulator.empty(1, 2), np.zeros((3, 3, 2)),
                       np.zeros((3, 3, 1)), region=(2, 0, 2, 1))


class TestFvFromStats:
    def test_empty_accumulator_gives_zero_fv(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, 3, 4)
        fv = fv_from_stats(FvAccumulator.empty(3, 4), params)
        assert fv.values.shape == (fisher_vector_dim(3, 4),)
        assert not fv.values.any()
        assert not fv.normalized

    def test_single_point_single_component_algebra(self):
        # K=1, one descriptor: weight block 0, mean block (x-mu)/sigma,
        # variance block ((x-mu)^2 - var)/(sqrt(2)*var)
        rng = np.random.default_rng(6)
        params = random_params(rng, 1, 3)
        x = rng.normal(size=(1, 3))
        gamma = np.ones((1, 1))
        acc = accumulate(FvAccumulator.empty(1, 3), x, gamma)
        fv = fv_from_stats(acc, params).values
        sigma = np.exp(0.5 * params.log_vars[0])
        var = np.exp(params.log_vars[0])
        assert abs(fv[0]) < 1e-12
        np.testing.assert_allclose(fv[1:4], (x[0] - params.means[0]) / sigma,
                                   rtol=1e-12)
        expected_var_block = ((x[0] - params.means[0]) ** 2 - var) \
            / (np.sqrt(2.0) * var)
        np.testing.assert_allclose(fv[4:], expected_var_block, rtol=1e-12)

    def test_vanishes_at_em_fixed_point(self):
        # the score of the fitted mixture over its own training set is zero
        # at the maximum-likelihood fixed point
        rng = np.random.default_rng(7)
        samples = np.concatenate([rng.normal(size=(300, 3)) + 2.0,
                                  rng.normal(size=(300, 3)) - 2.0])
        params = em_fit(samples, 2, iters=500, tol=1e-14, seed=0)
        gamma = posteriors(samples, params)
        acc = accumulate(FvAccumulator.empty(2, 3), samples, gamma)
        fv = fv_from_stats(acc, params)
        assert np.max(np.abs(fv.values)) < 1e-3 * acc.count

    def test_dimension_formula(self):
        assert fisher_vector_dim(256, 100) == 51456
        rng = np.random.default_rng(8)
        params = random_params(rng, 5, 7)
        fv = fv_from_stats(FvAccumulator.empty(5, 7), params)
        assert fv.values.size == 5 * (2 * 7 + 1)


class TestNormalizations:
    def test_power_closed_forms(self):
        v = np.array([0.0, 1.0, 4.0, -4.0])
        np.testing.assert_array_equal(power_normalize(v),
                                      [0.0, 1.0, 2.0, -2.0])

    def test_power_not_idempotent(self):
        assert power_normalize(power_normalize(np.array([16.0])))[0] == 2.0

    def test_power_elementwise_oracle(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=100) * 10
        out = power_normalize(v)
        for i in range(100):
            expected = np.sqrt(abs(v[i])) * (1 if v[i] >= 0 else -1)
            assert out[i] == expected  # same float ops, exact

    def test_l2_closed_form(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])),
                                   [0.6, 0.8], rtol=1e-15)

    def test_l2_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(v), v, rtol=1e-15)

    def test_l2_zero_vector_stays_zero(self):
        v = np.zeros(5)
        np.testing.assert_array_equal(l2_normalize(v), v)
        fv = normalize_fv(FisherVector(v))
        assert not fv.normalized

    def test_normalize_fv_unit_norm(self):
        rng = np.random.default_rng(10)
        fv = normalize_fv(FisherVector(rng.normal(size=30)))
        assert fv.normalized
        assert abs(np.linalg.norm(fv.values) - 1.0) < 1e-10


class TestMerge:
    def _random_acc(self, rng, k=3, n_dims=2):
        params = random_params(rng, k, n_dims)
        x = rng.normal(size=(int(rng.integers(1, 9)), n_dims))
        return accumulate(FvAccumulator.empty(k, n_dims), x,
                          posteriors(x, params))

    def test_merge_with_empty_is_identity(self):
        rng = np.random.default_rng(11)
        acc = self._random_acc(rng)
        out = merge(acc, FvAccumulator.empty(3, 2))
        np.testing.assert_array_equal(out.s0, acc.s0)
        np.testing.assert_array_equal(out.s1, acc.s1)
        np.testing.assert_array_equal(out.s2, acc.s2)
        assert out.count == acc.count

    def test_commutative_associative(self):
        rng = np.random.default_rng(12)
        a, b, c = (self._random_acc(rng) for _ in range(3))
        ab = merge(a, b)
        ba = merge(b, a)
        np.testing.assert_array_equal(ab.s1, ba.s1)
        abc1 = merge(merge(a, b), c)
        abc2 = merge(a, merge(b, c))
        np.testing.assert_allclose(abc1.s2, abc2.s2, rtol=1e-15)
        assert abc1.count == abc2.count

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            merge(FvAccumulator.empty(2, 3), FvAccumulator.empty(2, 4))

    def test_merged_equals_joint_accumulation(self):
        rng = np.random.default_rng(13)
        params = random_params(rng, 3, 4)
        x = rng.normal(size=(20, 4))
        gamma = posteriors(x, params)
        joint = accumulate(FvAccumulator.empty(3, 4), x, gamma)
        parts = merge(
            accumulate(FvAccumulator.empty(3, 4), x[:12], gamma[:12]),
            accumulate(FvAccumulator.empty(3, 4), x[12:], gamma[12:]))
        fv_joint = fv_from_stats(joint, params).values
        fv_parts = fv_from_stats(parts, params).values
        assert np.max(np.abs(fv_joint - fv_parts)) < 1e-10

    def test_additivity_over_random_partitions(self):
        rng = np.random.default_rng(14)
        params = random_params(rng, 2, 3)
        x = rng.normal(size=(30, 3))
        gamma = posteriors(x, params)
        joint = accumulate(FvAccumulator.empty(2, 3), x, gamma)
        for _ in range(5):
            cuts = np.sort(rng.choice(np.arange(1, 30), size=3,
                                      replace=False))
            merged = FvAccumulator.empty(2, 3)
            for lo, hi in zip(np.concatenate([[0], cuts]),
                              np.concatenate([cuts, [30]])):
                merged = merge(merged, accumulate(
                    FvAccumulator.empty(2, 3), x[lo:hi], gamma[lo:hi]))
            assert np.max(np.abs(
                fv_from_stats(merged, params).values
                - fv_from_stats(joint, params).values)) < 1e-10


class TestFvBackward:
    def _chain(self, seed=15, min_unnorm=2e-3):
        # keep the unnormalized entries away from the signed square root's
        # smoothed region so finite differences stay meaningful
        for salt in range(64):
            rng = np.random.default_rng(seed + salt)
            params = random_params(rng, 2, 3)
            batches = [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))]
            fv, cache = fv_forward(batches, params)
            if np.min(np.abs(cache.unnormalized)) > min_unnorm:
                return rng, params, batches, fv, cache
        raise AssertionError("no well-conditioned probe found")

    def test_zero_upstream(self):
        _, params, batches, fv, cache = self._chain()
        grads_x, g_alpha, g_means, g_lv = fv_backward(
            np.zeros_like(fv.values), cache, params)
        for g in grads_x:
            assert not g.any()
        assert not g_alpha.any() and not g_means.any() and not g_lv.any()

    def test_unaccumulated_region_gets_zero_gradient(self):
        rng = np.random.default_rng(16)
        params = random_params(rng, 2, 3)
        x = rng.normal(size=(4, 4, 3))
        gamma = posteriors(x, params)
        region = (0, 0, 2, 4)   # top half only
        acc = accumulate(FvAccumulator.empty(2, 3), x, gamma, region=region)
        # gradients flow only through fibers inside the region; a
        # descriptor outside contributes to no statistic, so perturbing it
        # cannot change the output
        fv0 = fv_from_stats(acc, params).values
        x2 = x.copy()
        x2[3, 1] += 0.5   # outside the region
        gamma2 = posteriors(x2, params)
        acc2 = accumulate(FvAccumulator.empty(2, 3), x2, gamma2,
                          region=region)
        np.testing.assert_array_equal(fv_from_stats(acc2, params).values, fv0)

    def test_finite_differences_through_normalized_fv(self):
        _, params, batches, fv, cache = self._chain()
        rng = np.random.default_rng(17)
        upstream = rng.normal(size=fv.values.shape)
        grads_x, g_alpha, g_means, g_lv = fv_backward(upstream, cache, params)

        def objective():
            out, _ = fv_forward(batches, params)
            return float(np.sum(upstream * out.values))

        h = 1e-5
        worst = 0.0
        checks = [(batches[0], grads_x[0]), (batches[1], grads_x[1]),
                  (params.alpha, g_alpha), (params.means, g_means),
                  (params.log_vars, g_lv)]
        for arr, grad in checks:
            flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = objective()
                flat[i] = orig - h
                f_minus = objective()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                worst = max(worst, abs(gflat[i] - numeric)
                            / max(abs(gflat[i]), abs(numeric), 1e-8))
        assert worst < 1e-3, worst

    def test_power_backward_smoothing(self):
        v = np.array([4.0, -9.0])
        g = power_normalize_backward(np.ones(2), v)
        np.testing.assert_allclose(g, [1.0 / (2 * np.sqrt(4.0 + 1e-8)),
                                       1.0 / (2 * np.sqrt(9.0 + 1e-8))])

    def test_l2_backward_orthogonal_to_direction(self):
        rng = np.random.default_rng(18)
        v = rng.normal(size=10)
        g = l2_normalize_backward(rng.normal(size=10), v)
        # the normalized vector has constant norm along v
        assert abs(np.dot(g, v / np.linalg.norm(v))) < 1e-12
