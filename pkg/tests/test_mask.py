import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agl import ConfigError
from agl.hvg import GeneRanking
from agl.mask import effective_k, hard_mask, mask_grad_k, soft_mask


def ranking(n, seed=None):
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    return GeneRanking.from_order(order)


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestSoftMask:
    def test_midpoint_is_exactly_half(self):
        r = ranking(10)
        m = soft_mask(r, 0.3, 0.01)
        assert m.lambdas[2] == 0.5

    def test_direct_value(self):
        r = ranking(10)
        m = soft_mask(r, 0.5, 0.01)
        # gene of rank 6 sits at r = 0.6
        assert abs(m.lambdas[5] - logistic(-10.0)) < 1e-15
        assert abs(m.lambdas[5] - 4.5398e-5) < 1e-9

    def test_matches_two_exponential_form(self):
        r = ranking(50, seed=1)
        k, tau = 0.37, 0.05
        m = soft_mask(r, k, tau)
        direct = np.exp(k / tau) / (np.exp(r.normalized_rank / tau) + np.exp(k / tau))
        np.testing.assert_allclose(m.lambdas, direct, rtol=1e-12)

    @pytest.mark.parametrize("k,tau", [(0.0, 0.01), (1.5, 0.01), (0.5, 0.0), (0.5, -1.0)])
    def test_rejects_bad_arguments(self, k, tau):
        with pytest.raises(ConfigError):
            soft_mask(ranking(5), k, tau)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 300), k=st.floats(0.001, 1.0), tau=st.floats(1e-4, 1.0))
    def test_monotone_in_rank_and_in_k(self, n, k, tau):
        r = ranking(n)
        lam = soft_mask(r, k, tau).lambdas
        assert np.all(np.diff(lam) <= 0)
        assert np.all(lam >= 0) and np.all(lam <= 1)
        k2 = min(1.0, k + 0.01)
        if k2 > k:
            assert np.all(soft_mask(r, k2, tau).lambdas >= lam)

    def test_strict_monotonicity_where_resolvable(self):
        r = ranking(200)
        lam = soft_mask(r, 0.5, 0.2).lambdas
        assert np.all(np.diff(lam) < 0)
        assert np.all(soft_mask(r, 0.51, 0.2).lambdas > lam)

    def test_extreme_margins_stay_finite(self):
        r = ranking(1000)
        for tau in (1e-6, 1e-9):
            lam = soft_mask(r, 0.5, tau).lambdas
            assert np.all(np.isfinite(lam))
            assert np.all(np.isfinite(mask_grad_k(soft_mask(r, 0.5, tau))))


class TestMaskGrad:
    def test_peak_value(self):
        m = soft_mask(ranking(10), 0.4, 0.01)
        assert mask_grad_k(m)[3] == 25.0

    def test_closed_form_identity(self):
        m = soft_mask(ranking(100, seed=3), 0.42, 0.03)
        g = mask_grad_k(m)
        np.testing.assert_allclose(g, m.lambdas * (1 - m.lambdas) / 0.03, rtol=1e-12, atol=1e-12)
        assert np.all(g > 0)

    def test_tails_underflow_gracefully(self):
        g = mask_grad_k(soft_mask(ranking(100), 0.01, 0.001))
        assert np.all(np.isfinite(g)) and np.all(g >= 0)
        assert g[-1] < 1e-300

    @staticmethod
    def _fd(r, k, tau, step):
        """Central difference per weight; genes inside the cut-off difference ``-(1 - lambda)``.

        Near 1 the weight itself has no spare digits, its complement does, and
        both have the same derivative in k.
        """
        from scipy.special import expit

        below = (k - r.normalized_rank) <= 0

        def value(kk):
            z = (kk - r.normalized_rank) / tau
            return np.where(below, expit(z), -expit(-z))

        return (value(k + step) - value(k - step)) / (2 * step)

    def test_finite_differences_coarse_step(self):
        # step tau/10: truncation error is (1/10)^2 / 6 * |1 - 6 l (1 - l)| <= 1.7e-3 relative
        r = ranking(100, seed=4)
        k, tau = 0.503, 0.01
        fd = self._fd(r, k, tau, tau / 10)
        g = mask_grad_k(soft_mask(r, k, tau))
        ok = g > 1e-12
        assert np.max(np.abs(fd[ok] - g[ok]) / g[ok]) < 2e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences_fine_step(self, seed):
        rng = np.random.default_rng(seed)
        r = ranking(100, seed=seed)
        k, tau = float(rng.uniform(0.05, 0.95)), 0.01
        fd = self._fd(r, k, tau, tau / 1000)
        g = mask_grad_k(soft_mask(r, k, tau))
        ok = g > 1e-12
        assert np.max(np.abs(fd[ok] - g[ok]) / g[ok]) < 1e-6


class TestHardMask:
    def test_full_pool(self):
        assert hard_mask(ranking(7), 1.0).tolist() == [1.0] * 7

    def test_single_gene(self):
        r = ranking(10, seed=5)
        hm = hard_mask(r, 1 / 10)
        assert hm.sum() == 1 and hm[r.ordered_ids[0]] == 1

    def test_fractional_cutoff(self):
        r = ranking(10)
        assert hard_mask(r, 0.35).tolist() == [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]

    def test_soft_limit(self):
        r = ranking(20, seed=6)
        soft = soft_mask(r, 0.52, 1e-6).lambdas
        np.testing.assert_allclose(soft, hard_mask(r, 0.52), atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(5, 200), k=st.floats(0.01, 1.0), tau=st.floats(1e-5, 1e-3))
    def test_agrees_with_thresholded_soft_mask(self, n, k, tau):
        r = ranking(n)
        nr = r.normalized_rank
        if np.min(np.abs(nr - k)) <= 5 * tau:
            return
        assert np.array_equal(soft_mask(r, k, tau).lambdas > 0.5, hard_mask(r, k) > 0)


class TestEffectiveK:
    def test_full_pool_excludes_boundary(self):
        assert effective_k(soft_mask(ranking(10), 1.0, 0.01)) == 9

    def test_just_over_half(self):
        assert effective_k(soft_mask(ranking(10), 0.5 + 1e-3, 0.01)) == 5

    def test_just_below_first_rank(self):
        assert effective_k(soft_mask(ranking(10), 0.1 - 1e-9, 0.01)) == 0

    def test_matches_weight_threshold(self):
        m = soft_mask(ranking(200, seed=8), 0.3333, 0.01)
        assert effective_k(m) == int(np.sum(m.lambdas > 0.5))
