import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agl import DataError, EvaluationError
from agl.loss import pcc_metric, pearson_loss, pearson_loss_grad, per_gene_pcc, total_loss
from agl.numeric import finite_diff_grad


def col(*v):
    return np.array(v, dtype=float)[:, None]


class TestPearsonLoss:
    def test_perfect_correlation(self):
        t = col(1, 4, 2, 8)
        assert abs(pearson_loss(t, t).per_gene_loss[0]) < 1e-9

    def test_perfect_anticorrelation(self):
        t = col(1, 4, 2, 8)
        assert abs(pearson_loss(-t, t).per_gene_loss[0] - 2.0) < 1e-9

    def test_hand_computed(self):
        # centred pred (-1,0,1), centred true (-2/3,1/3,1/3): r = 1 / (sqrt2 * sqrt(2/3))
        loss = pearson_loss(col(1, 2, 3), col(1, 2, 2)).per_gene_loss[0]
        assert abs(loss - (1 - math.sqrt(3) / 2)) < 1e-12

    def test_degenerate_gene_flagged(self):
        rep = pearson_loss(np.c_[col(1, 1, 1), col(1, 2, 3)], np.c_[col(1, 2, 3), col(3, 1, 2)])
        assert rep.valid_flags.tolist() == [False, True]
        assert rep.per_gene_loss[0] == 1.0

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            pearson_loss(col(1), col(2))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), a=st.floats(0.01, 100), b=st.floats(-50, 50))
    def test_shift_scale_invariance_and_range(self, seed, a, b):
        rng = np.random.default_rng(seed)
        p, t = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        base = pearson_loss(p, t).per_gene_loss
        moved = pearson_loss(a * p + b, t).per_gene_loss
        assert np.all((base >= 0) & (base <= 2))
        np.testing.assert_allclose(moved, base, atol=1e-9)


def loss_sum(pred_flat, shape, true):
    return pearson_loss(pred_flat.reshape(shape), true).total


class TestPearsonGrad:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        fd = finite_diff_grad(lambda v: loss_sum(v, p.shape, t), p.ravel(), 1e-5)
        g = pearson_loss_grad(p, t).ravel()
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4

    def test_at_optimum(self):
        t = np.random.default_rng(1).normal(size=(10, 2))
        g = pearson_loss_grad(t, t)
        np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose((g * (t - t.mean(0))).sum(axis=0), 0.0, atol=1e-10)
        fd = finite_diff_grad(lambda v: loss_sum(v, t.shape, t), t.ravel(), 1e-5)
        np.testing.assert_allclose(g.ravel(), fd, atol=1e-4)

    def test_invalid_gene_has_zero_gradient(self):
        p = np.c_[col(2, 2, 2, 2), col(1, 3, 2, 5)]
        t = np.c_[col(1, 2, 3, 4), col(4, 1, 2, 2)]
        g = pearson_loss_grad(p, t)
        assert not g[:, 0].any() and g[:, 1].any()

    def test_scale_direction_is_flat(self):
        rng = np.random.default_rng(3)
        p, t = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
        g = pearson_loss_grad(p, t)
        np.testing.assert_allclose((g * p).sum(axis=0), 0.0, atol=1e-6)


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.pp, self.tp = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
        self.pa, self.ta = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))

    def test_zero_mask_is_primary_only(self):
        tl = total_loss(self.pp, self.tp, self.pa, self.ta, np.zeros(3))
        assert tl.value == pearson_loss(self.pp, self.tp).total
        assert not tl.grad_aux.any()

    def test_unit_mask_sums_everything(self):
        tl = total_loss(self.pp, self.tp, self.pa, self.ta, np.ones(3))
        expected = pearson_loss(np.c_[self.pp, self.pa], np.c_[self.tp, self.ta]).total
        assert abs(tl.value - expected) < 1e-12

    def test_gradient_concatenation(self):
        lam = np.array([0.5, 0.1, 0.9])
        tl = total_loss(self.pp, self.tp, self.pa, self.ta, lam)
        np.testing.assert_allclose(tl.grad_pri, pearson_loss_grad(self.pp, self.tp), atol=1e-12)
        np.testing.assert_allclose(tl.grad_aux, pearson_loss_grad(self.pa, self.ta) * lam,
                                   atol=1e-12)

    def test_half_weight_halves_gradient(self):
        lam = np.array([0.5, 0.0, 0.0])
        tl = total_loss(self.pp, self.tp, self.pa, self.ta, lam)
        full = pearson_loss_grad(self.pa, self.ta)[:, 0]
        np.testing.assert_allclose(tl.grad_aux[:, 0], 0.5 * full, rtol=1e-14, atol=1e-17)

    def test_normalized_divides_by_counts(self):
        tl = total_loss(self.pp, self.tp, self.pa, self.ta, np.ones(3), normalize=True)
        expected = (pearson_loss(self.pp, self.tp).total / 2
                    + pearson_loss(self.pa, self.ta).total / 3)
        assert abs(tl.value - expected) < 1e-12


class TestPcc:
    def test_identity(self):
        t = np.random.default_rng(0).normal(size=(30, 4))
        assert abs(pcc_metric(t, t) - 1.0) < 1e-12

    def test_independent_noise_is_small(self):
        rng = np.random.default_rng(42)
        r = per_gene_pcc(rng.normal(size=(2000, 10)), rng.normal(size=(2000, 10)))
        assert np.all(np.abs(r) < 0.1)

    def test_zero_variance_genes_excluded(self):
        t = np.c_[col(1, 2, 3, 4), col(5, 5, 5, 5)]
        assert abs(pcc_metric(t, t) - 1.0) < 1e-12

    def test_all_invalid(self):
        with pytest.raises(EvaluationError):
            pcc_metric(np.ones((4, 2)), np.ones((4, 2)))
