"""Small multi-output regressor with hand-derived gradients, Adam, and an FD oracle.

The network is one hidden layer shared by two linear heads::

    hidden = act(x @ trunk_w + trunk_b)
    pred_pri = hidden @ pri_w + pri_b
    pred_aux = hidden @ aux_w + aux_b

Everything is float64. Matrices are plain 2-D numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agl.errors import ConfigError, OracleError, TrainingError

BLOCKS = ("trunk_w", "trunk_b", "pri_w", "pri_b", "aux_w", "aux_b")

ACTIVATIONS = ("tanh", "identity")


@dataclass
class ModelParams:
    trunk_w: np.ndarray
    trunk_b: np.ndarray
    pri_w: np.ndarray
    pri_b: np.ndarray
    aux_w: np.ndarray
    aux_b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        d, h = self.trunk_w.shape
        if self.trunk_b.shape != (h,):
            raise ConfigError(f"trunk_b shape {self.trunk_b.shape}, expected {(h,)}")
        if self.pri_w.ndim != 2 or self.pri_w.shape[0] != h or self.pri_w.shape[1] < 1:
            raise ConfigError(f"pri_w shape {self.pri_w.shape} incompatible with hidden {h}")
        if self.pri_b.shape != (self.pri_w.shape[1],):
            raise ConfigError("pri_b does not match pri_w")
        if self.aux_w.ndim != 2 or self.aux_w.shape[0] != h:
            raise ConfigError(f"aux_w shape {self.aux_w.shape} incompatible with hidden {h}")
        if self.aux_b.shape != (self.aux_w.shape[1],):
            raise ConfigError("aux_b does not match aux_w")

    @property
    def feature_dim(self) -> int:
        return self.trunk_w.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.trunk_w.shape[1]

    @property
    def n_pri(self) -> int:
        return self.pri_w.shape[1]

    @property
    def n_aux(self) -> int:
        return self.aux_w.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()},
                           activation=self.activation)

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "ModelParams":
        """Copy-free replacement of some blocks."""
        return ModelParams(**{**self.blocks(), **blocks}, activation=self.activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in BLOCKS])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for name in BLOCKS:
            ref = getattr(self, name)
            out[name] = np.asarray(flat[pos:pos + ref.size], dtype=np.float64).reshape(ref.shape)
            pos += ref.size
        if pos != flat.size:
            raise ConfigError(f"flat vector has {flat.size} entries, expected {pos}")
        return self.with_blocks(out)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(feature_dim: int, hidden_dim: int, n_pri: int, n_aux: int,
                seed: int, activation: str = "tanh") -> ModelParams:
    """Fan-in scaled uniform init.

    Each block draws from its own child stream of ``seed``, so the trunk and
    primary head are identical for any ``n_aux`` (including 0).
    """
    if min(feature_dim, hidden_dim, n_pri) < 1 or n_aux < 0:
        raise ConfigError("feature_dim, hidden_dim, n_pri must be >= 1 and n_aux >= 0")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    return ModelParams(
        trunk_w=_uniform(streams[0], feature_dim, (feature_dim, hidden_dim)),
        trunk_b=np.zeros(hidden_dim),
        pri_w=_uniform(streams[1], hidden_dim, (hidden_dim, n_pri)),
        pri_b=np.zeros(n_pri),
        aux_w=_uniform(streams[2], hidden_dim, (hidden_dim, n_aux)),
        aux_b=np.zeros(n_aux),
        activation=activation,
    )


@dataclass
class ForwardCache:
    features: np.ndarray
    hidden: np.ndarray
    params: ModelParams


def mlp_forward(params: ModelParams, features: np.ndarray):
    """Return ``(pred_pri, pred_aux, cache)`` for a ``batch x feature_dim`` input."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim or features.shape[0] < 1:
        raise ConfigError(
            f"features shape {features.shape} does not match feature_dim {params.feature_dim}")
    pre = features @ params.trunk_w + params.trunk_b
    hidden = np.tanh(pre) if params.activation == "tanh" else pre
    pred_pri = hidden @ params.pri_w + params.pri_b
    pred_aux = hidden @ params.aux_w + params.aux_b
    return pred_pri, pred_aux, ForwardCache(features, hidden, params)


def mlp_backward(cache: ForwardCache, grad_pri: np.ndarray, grad_aux: np.ndarray) -> ModelParams:
    """Pull output cotangents back to parameter gradients (same shapes as params)."""
    p = cache.params
    batch = cache.hidden.shape[0]
    if grad_pri.shape != (batch, p.n_pri) or grad_aux.shape != (batch, p.n_aux):
        raise ConfigError(
            f"cotangent shapes {grad_pri.shape}/{grad_aux.shape} do not match outputs "
            f"{(batch, p.n_pri)}/{(batch, p.n_aux)}")
    d_hidden = grad_pri @ p.pri_w.T + grad_aux @ p.aux_w.T
    if p.activation == "tanh":
        d_pre = d_hidden * (1.0 - cache.hidden ** 2)
    else:
        d_pre = d_hidden
    return p.with_blocks({
        "trunk_w": cache.features.T @ d_pre,
        "trunk_b": d_pre.sum(axis=0),
        "pri_w": cache.hidden.T @ grad_pri,
        "pri_b": grad_pri.sum(axis=0),
        "aux_w": cache.hidden.T @ grad_aux,
        "aux_b": grad_aux.sum(axis=0),
    })


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **kw) -> "AdamState":
        blocks = params.blocks()
        return cls({k: np.zeros_like(v) for k, v in blocks.items()},
                   {k: np.zeros_like(v) for k, v in blocks.items()}, **kw)

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.first_moment.items()},
                         {k: v.copy() for k, v in self.second_moment.items()},
                         self.step_count, self.beta1, self.beta2, self.eps)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float) -> ModelParams:
    """Bias-corrected Adam. Mutates ``state``; returns new params."""
    if lr <= 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    grad_blocks = grads.blocks()
    for name, g in grad_blocks.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", block=name, step=state.step_count)
    if not state.first_moment:
        fresh = AdamState.zeros_like(params)
        state.first_moment, state.second_moment = fresh.first_moment, fresh.second_moment
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new = {}
    for name, value in params.blocks().items():
        g = grad_blocks[name]
        if g.shape != value.shape:
            raise ConfigError(f"gradient block {name} shape {g.shape} != {value.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        new[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params.with_blocks(new)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    return params.with_blocks({k: v - lr * getattr(grads, k) for k, v in params.blocks().items()})


def finite_diff_grad(loss_fn, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    x = np.array(point, dtype=np.float64, ndmin=1)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        hi = loss_fn(x)
        x[i] = orig - step
        lo = loss_fn(x)
        x[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"non-finite loss at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad
