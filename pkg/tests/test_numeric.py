import math

import numpy as np
import pytest

from agl import ConfigError, OracleError, TrainingError
from agl.numeric import (
    AdamState,
    ModelParams,
    adam_step,
    finite_diff_grad,
    init_params,
    mlp_backward,
    mlp_forward,
)


def random_params(seed, d=3, h=5, n_pri=2, n_aux=4, activation="tanh"):
    rng = np.random.default_rng(seed)
    return ModelParams(
        trunk_w=rng.normal(size=(d, h)), trunk_b=rng.normal(size=h),
        pri_w=rng.normal(size=(h, n_pri)), pri_b=rng.normal(size=n_pri),
        aux_w=rng.normal(size=(h, n_aux)), aux_b=rng.normal(size=n_aux),
        activation=activation,
    )


def forward_by_loops(p, x):
    """Element-by-element evaluation of the same network."""
    batch, d = x.shape
    h = p.trunk_w.shape[1]
    pri = np.zeros((batch, p.n_pri))
    aux = np.zeros((batch, p.n_aux))
    for i in range(batch):
        hidden = []
        for u in range(h):
            s = p.trunk_b[u] + sum(x[i, a] * p.trunk_w[a, u] for a in range(d))
            hidden.append(math.tanh(s) if p.activation == "tanh" else s)
        for j in range(p.n_pri):
            pri[i, j] = p.pri_b[j] + sum(hidden[u] * p.pri_w[u, j] for u in range(h))
        for j in range(p.n_aux):
            aux[i, j] = p.aux_b[j] + sum(hidden[u] * p.aux_w[u, j] for u in range(h))
    return pri, aux


class TestForward:
    def test_zero_weights_give_zero_outputs(self):
        p = init_params(3, 4, 2, 5, seed=0)
        p = p.with_blocks({k: np.zeros_like(v) for k, v in p.blocks().items()})
        pri, aux, _ = mlp_forward(p, np.random.default_rng(1).normal(size=(6, 3)))
        assert not pri.any() and not aux.any()

    def test_identity_network(self):
        d = 3
        p = ModelParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d),
                        np.zeros((d, 0)), np.zeros(0), activation="identity")
        x = np.random.default_rng(2).normal(size=(4, d))
        pri, aux, _ = mlp_forward(p, x)
        np.testing.assert_array_equal(pri, x)
        assert aux.shape == (4, 0)

    @pytest.mark.parametrize("activation", ["tanh", "identity"])
    def test_matches_loop_oracle(self, activation):
        p = random_params(3, activation=activation)
        x = np.random.default_rng(4).normal(size=(4, 3))
        pri, aux, _ = mlp_forward(p, x)
        o_pri, o_aux = forward_by_loops(p, x)
        np.testing.assert_allclose(pri, o_pri, atol=1e-12, rtol=0)
        np.testing.assert_allclose(aux, o_aux, atol=1e-12, rtol=0)

    def test_deterministic(self):
        p = random_params(5)
        x = np.random.default_rng(6).normal(size=(8, 3))
        a = mlp_forward(p, x)
        b = mlp_forward(p, x)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            mlp_forward(random_params(0), np.zeros((2, 4)))

    def test_init_trunk_independent_of_aux_count(self):
        a = init_params(6, 4, 3, 0, seed=11)
        b = init_params(6, 4, 3, 17, seed=11)
        np.testing.assert_array_equal(a.trunk_w, b.trunk_w)
        np.testing.assert_array_equal(a.pri_w, b.pri_w)
        bound = 1 / np.sqrt(6)
        assert np.abs(a.trunk_w).max() <= bound


def scalarized(p, x, w_pri, w_aux):
    pri, aux, _ = mlp_forward(p, x)
    return float((pri * w_pri).sum() + (aux * w_aux).sum())


class TestBackward:
    def test_zero_cotangent(self):
        p = random_params(0)
        _, _, cache = mlp_forward(p, np.ones((3, 3)))
        g = mlp_backward(cache, np.zeros((3, 2)), np.zeros((3, 4)))
        assert all(not v.any() for v in g.blocks().values())

    def test_linear_in_cotangents(self):
        rng = np.random.default_rng(1)
        p = random_params(1)
        _, _, cache = mlp_forward(p, rng.normal(size=(5, 3)))
        g1 = (rng.normal(size=(5, 2)), rng.normal(size=(5, 4)))
        g2 = (rng.normal(size=(5, 2)), rng.normal(size=(5, 4)))
        a = mlp_backward(cache, *g1)
        b = mlp_backward(cache, *g2)
        c = mlp_backward(cache, g1[0] + g2[0], g1[1] + g2[1])
        for name in c.blocks():
            np.testing.assert_allclose(getattr(c, name), getattr(a, name) + getattr(b, name),
                                       atol=1e-12, rtol=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = random_params(seed)
        x = rng.normal(size=(4, 3))
        w_pri, w_aux = rng.normal(size=(4, 2)), rng.normal(size=(4, 4))
        _, _, cache = mlp_forward(p, x)
        analytic = mlp_backward(cache, w_pri, w_aux).flatten()
        fd = finite_diff_grad(lambda v: scalarized(p.unflatten(v), x, w_pri, w_aux),
                              p.flatten(), 1e-5)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4

    def test_shape_mismatch(self):
        p = random_params(0)
        _, _, cache = mlp_forward(p, np.ones((3, 3)))
        with pytest.raises(ConfigError):
            mlp_backward(cache, np.zeros((3, 3)), np.zeros((3, 4)))


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = random_params(0)
        state = AdamState.zeros_like(p)
        zero = p.with_blocks({k: np.zeros_like(v) for k, v in p.blocks().items()})
        q = p
        for _ in range(5):
            q = adam_step(q, zero, state, 1e-2)
        for name, v in p.blocks().items():
            np.testing.assert_array_equal(getattr(q, name), v)
            assert not state.first_moment[name].any()
        assert state.step_count == 5

    def test_constant_gradient_moves_opposite(self):
        p = random_params(1)
        grad = p.with_blocks({k: np.full_like(v, -0.3) for k, v in p.blocks().items()})
        state = AdamState.zeros_like(p)
        prev = p.flatten()
        for _ in range(20):
            p = adam_step(p, grad, state, 1e-3)
            cur = p.flatten()
            assert np.all(cur > prev)
            prev = cur

    def test_first_step_closed_form(self):
        # m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
        p = random_params(2)
        grad = p.with_blocks({k: np.full_like(v, 0.5) for k, v in p.blocks().items()})
        q = adam_step(p, grad, AdamState.zeros_like(p), 1e-2)
        delta = q.flatten() - p.flatten()
        expected = -1e-2 * 0.5 / (0.5 + 1e-8)
        np.testing.assert_allclose(delta, expected, rtol=1e-9)
        assert np.all(np.abs(delta) >= 0.99e-2) and np.all(np.abs(delta) <= 1e-2)

    def test_non_finite_gradient_names_block(self):
        p = random_params(0)
        blocks = {k: np.zeros_like(v) for k, v in p.blocks().items()}
        blocks["pri_w"][0, 0] = np.nan
        with pytest.raises(TrainingError, match="pri_w"):
            adam_step(p, p.with_blocks(blocks), AdamState.zeros_like(p), 1e-3)

    def test_rejects_non_positive_lr(self):
        p = random_params(0)
        with pytest.raises(ConfigError):
            adam_step(p, p, AdamState.zeros_like(p), 0.0)


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_grad(lambda v: float(v[0] ** 2), [3.0], 1e-4)
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        g = finite_diff_grad(lambda v: 4.2, np.arange(5.0), 1e-4)
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_sine(self):
        g = finite_diff_grad(lambda v: math.sin(v[0]), [0.0], 1e-4)
        assert abs(g[0] - 1.0) < 1e-8

    def test_non_finite_loss(self):
        with pytest.raises(OracleError):
            finite_diff_grad(lambda v: float("nan"), [1.0], 1e-4)

    def test_step_must_be_positive(self):
        with pytest.raises(ConfigError):
            finite_diff_grad(lambda v: 0.0, [1.0], 0.0)
