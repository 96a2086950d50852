"""Bi-level training of the network weights and the scalar top-k cut-off.

One outer round trains the weights at a fixed cut-off until the training
loss plateaus (inner phase), then runs the k-loop: each k-step takes ``H``
provisional gradient steps (the lookahead), scores the lookahead weights on
a validation mini-batch of primary genes, and moves ``k`` along the
derivative of that score. Lookahead weights are discarded unless
``commit_lookahead`` is set.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from agl.errors import ConfigError, TrainingError
from agl.hvg import GeneRanking
from agl.loss import pcc_metric, pearson_loss, pearson_loss_grad, total_loss
from agl.mask import effective_k, mask_grad_k, soft_mask
from agl.numeric import (
    AdamState,
    ModelParams,
    adam_step,
    init_params,
    mlp_backward,
    mlp_forward,
    sgd_step,
)

log = logging.getLogger(__name__)

HYPERGRAD_MODES = ("fd", "analytic_h1")
K_OPTIMIZERS = ("plain", "adam")
LOOKAHEAD_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class BilevelConfig:
    alpha: float = 3e-5
    beta: float = 3e-3
    H: int = 2
    tau: float = 0.01
    mini_batch: int = 128
    max_epochs: int = 1000
    early_stop_patience: int = 20
    loss_ma_window: int = 5
    k_init: float = 1.0
    hypergrad_mode: str = "fd"
    commit_lookahead: bool = False
    k_converge_tol: float = 1e-3
    k_converge_window: int = 10
    max_k_steps: int = 500
    max_outer_rounds: int = 10
    k_loop: bool = True
    k_optimizer: str = "plain"
    lookahead_optimizer: str = "sgd"
    # None means "same as alpha"
    lookahead_lr: float | None = None
    normalize_losses: bool = False
    hidden_dim: int = 32
    activation: str = "tanh"
    seed: int = 0

    def validate(self):
        if not (self.alpha > 0 and self.beta > 0 and self.tau > 0):
            raise ConfigError("alpha, beta and tau must be positive")
        if self.lookahead_lr is not None and self.lookahead_lr <= 0:
            raise ConfigError("lookahead_lr must be positive")
        if self.H < 1 or self.mini_batch < 2 or self.max_epochs < 1:
            raise ConfigError("need H >= 1, mini_batch >= 2, max_epochs >= 1")
        if self.early_stop_patience < 1 or self.loss_ma_window < 1:
            raise ConfigError("early_stop_patience and loss_ma_window must be >= 1")
        if not 0 < self.k_init <= 1:
            raise ConfigError(f"k_init must be in (0, 1], got {self.k_init}")
        if self.hypergrad_mode not in HYPERGRAD_MODES:
            raise ConfigError(f"hypergrad_mode must be one of {HYPERGRAD_MODES}")
        if self.k_optimizer not in K_OPTIMIZERS:
            raise ConfigError(f"k_optimizer must be one of {K_OPTIMIZERS}")
        if self.lookahead_optimizer not in LOOKAHEAD_OPTIMIZERS:
            raise ConfigError(f"lookahead_optimizer must be one of {LOOKAHEAD_OPTIMIZERS}")
        if self.hypergrad_mode == "analytic_h1" and (self.H != 1 or self.lookahead_optimizer != "sgd"):
            raise ConfigError("analytic_h1 hypergradient requires H = 1 and an sgd lookahead")
        if self.k_converge_window < 1 or self.max_k_steps < 1 or self.max_outer_rounds < 1:
            raise ConfigError("k-loop window and step/round limits must be >= 1")

    @property
    def lookahead_rate(self) -> float:
        return self.alpha if self.lookahead_lr is None else self.lookahead_lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Partition:
    """Features and targets of one set of spots."""

    x: np.ndarray
    y_pri: np.ndarray
    y_aux: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Partition":
        return Partition(self.x[idx], self.y_pri[idx], self.y_aux[idx])

    def drop_aux(self) -> "Partition":
        return Partition(self.x, self.y_pri, self.y_aux[:, :0])

    def select_aux(self, columns) -> "Partition":
        return Partition(self.x, self.y_pri, self.y_aux[:, columns])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "shuffle", "lookahead", "val")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def k_bounds(n_aux: int) -> tuple[float, float]:
    return (1.0 / n_aux, 1.0) if n_aux else (1.0, 1.0)


# ---------------------------------------------------------------------------
# Fixed-mask training
# ---------------------------------------------------------------------------


def loss_and_grads(params: ModelParams, batch: Partition, lambdas, normalize=False):
    pred_pri, pred_aux, cache = mlp_forward(params, batch.x)
    tl = total_loss(pred_pri, batch.y_pri, pred_aux, batch.y_aux, lambdas, normalize)
    return tl, mlp_backward(cache, tl.grad_pri, tl.grad_aux)


def epoch_batches(n: int, size: int, rng: np.random.Generator):
    """Shuffled mini-batches covering ``n`` rows; a trailing batch of one row is dropped."""
    perm = rng.permutation(n)
    batches = [perm[i:i + size] for i in range(0, n, size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches.pop()
    return batches


@dataclass
class FitResult:
    params: ModelParams
    epochs: int
    steps: int
    epoch_losses: list[float]
    stopped_early: bool


def fit_fixed_mask(params: ModelParams, opt: AdamState, train: Partition, lambdas,
                   config: BilevelConfig, rng: np.random.Generator,
                   on_step=None) -> FitResult:
    """Adam on the masked objective until the training-loss moving average stalls.

    ``opt`` is updated in place. ``on_step(step, params)`` is called after
    every update.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    losses: list[float] = []
    best = np.inf
    since_best = 0
    steps = 0
    for epoch in range(config.max_epochs):
        batch_losses = []
        for bi, idx in enumerate(epoch_batches(train.n, config.mini_batch, rng)):
            tl, grads = loss_and_grads(params, train.take(idx), lambdas, config.normalize_losses)
            if not np.isfinite(tl.value):
                raise TrainingError("non-finite training loss", epoch=epoch, batch=bi,
                                    seed=config.seed)
            try:
                params = adam_step(params, grads, opt, config.alpha)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch=epoch, batch=bi, seed=config.seed) from exc
            steps += 1
            batch_losses.append(tl.value)
            if on_step is not None:
                on_step(steps, params)
        losses.append(float(np.mean(batch_losses)))
        ma = float(np.mean(losses[-config.loss_ma_window:]))
        if ma < best:
            best, since_best = ma, 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                return FitResult(params, epoch + 1, steps, losses, True)
    return FitResult(params, config.max_epochs, steps, losses, False)


def predict_primary(params: ModelParams, x) -> np.ndarray:
    return mlp_forward(params, x)[0]


def evaluate_pcc(params: ModelParams, part: Partition) -> float:
    return pcc_metric(predict_primary(params, part.x), part.y_pri)


# ---------------------------------------------------------------------------
# Bi-level state and phases
# ---------------------------------------------------------------------------


@dataclass
class BilevelState:
    params: ModelParams
    k: float
    inner_opt: AdamState
    k_bounds: tuple[float, float]
    rngs: dict[str, np.random.Generator]
    k_m: float = 0.0
    k_v: float = 0.0
    k_t: int = 0
    k_history: list[float] = field(default_factory=list)
    effective_k_history: list[int] = field(default_factory=list)
    val_pcc_history: list[float] = field(default_factory=list)
    hypergrad_history: list[float] = field(default_factory=list)
    train_loss_history: list[float] = field(default_factory=list)
    epochs: int = 0
    outer_round: int = 0
    val_order: np.ndarray | None = None
    val_pos: int = 0


def init_state(train: Partition, config: BilevelConfig, k: float | None = None) -> BilevelState:
    config.validate()
    rngs = _streams(config.seed)
    n_aux = train.y_aux.shape[1]
    params = init_params(train.x.shape[1], config.hidden_dim, train.y_pri.shape[1], n_aux,
                         seed=int(rngs["init"].integers(2 ** 63)), activation=config.activation)
    lo, hi = k_bounds(n_aux)
    k0 = float(np.clip(config.k_init if k is None else k, lo, hi))
    state = BilevelState(params, k0, AdamState.zeros_like(params), (lo, hi), rngs)
    state.k_history.append(k0)
    return state


def current_mask(ranking: GeneRanking, k: float, tau: float) -> np.ndarray:
    if ranking.n == 0:
        return np.zeros(0)
    return soft_mask(ranking, k, tau).lambdas


def inner_phase(state: BilevelState, train: Partition, ranking: GeneRanking,
                config: BilevelConfig, on_step=None) -> BilevelState:
    lambdas = current_mask(ranking, state.k, config.tau)
    fit = fit_fixed_mask(state.params, state.inner_opt, train, lambdas, config,
                         state.rngs["shuffle"], on_step=on_step)
    state.params = fit.params
    state.epochs += fit.epochs
    state.train_loss_history.extend(fit.epoch_losses)
    return state


@dataclass
class Lookahead:
    params: ModelParams
    trajectory: list[ModelParams]
    # (cache, unmasked aux cotangent) per step, for the analytic hypergradient
    aux_cotangents: list[tuple]


def lookahead(params: ModelParams, k: float, batches: list[Partition], ranking: GeneRanking,
              config: BilevelConfig) -> Lookahead:
    """Chain ``len(batches)`` gradient steps from ``params``; ``params`` is not modified."""
    if len(batches) < 1:
        raise ConfigError("lookahead needs at least one mini-batch")
    lambdas = current_mask(ranking, k, config.tau)
    rate = config.lookahead_rate
    opt = AdamState.zeros_like(params) if config.lookahead_optimizer == "adam" else None
    traj = [params]
    cots = []
    cur = params
    for h, batch in enumerate(batches):
        pred_pri, pred_aux, cache = mlp_forward(cur, batch.x)
        tl = total_loss(pred_pri, batch.y_pri, pred_aux, batch.y_aux, lambdas,
                        config.normalize_losses)
        if not np.isfinite(tl.value):
            raise TrainingError("non-finite lookahead loss", step=h, k=k, seed=config.seed)
        grads = mlp_backward(cache, tl.grad_pri, tl.grad_aux)
        cots.append((cache, pred_aux, batch.y_aux))
        cur = adam_step(cur, grads, opt, rate) if opt is not None else sgd_step(cur, grads, rate)
        traj.append(cur)
    return Lookahead(cur, traj, cots)


def val_loss(params: ModelParams, val_batch: Partition, normalize: bool = False) -> float:
    pred = predict_primary(params, val_batch.x)
    loss = pearson_loss(pred, val_batch.y_pri).total
    return loss / val_batch.y_pri.shape[1] if normalize else loss


def val_loss_grad(params: ModelParams, val_batch: Partition, normalize: bool = False) -> ModelParams:
    pred_pri, pred_aux, cache = mlp_forward(params, val_batch.x)
    g = pearson_loss_grad(pred_pri, val_batch.y_pri)
    if normalize:
        g = g / val_batch.y_pri.shape[1]
    return mlp_backward(cache, g, np.zeros_like(pred_aux))


def hypergrad_fd(params: ModelParams, k: float, batches: list[Partition], val_batch: Partition,
                 ranking: GeneRanking, config: BilevelConfig,
                 bounds: tuple[float, float] = (0.0, 1.0), step: float | None = None) -> float:
    """Central difference of the post-lookahead validation loss in ``k``.

    Probe step defaults to ``tau / 10``, whose truncation error is up to
    ~1.7e-3 relative for a single sharply masked gene; pass a smaller
    ``step`` for oracle use. Next to a bound the difference is one-sided
    (first order instead of second).
    """
    eps = config.tau / 10.0 if step is None else float(step)
    if eps <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")
    lo, hi = bounds
    k_hi, k_lo = k + eps, k - eps
    if k_hi > hi:
        k_hi = k
    if k_lo < lo:
        k_lo = k
    if k_hi == k_lo:
        return 0.0

    def probe(kk):
        la = lookahead(params, kk, batches, ranking, config)
        return val_loss(la.params, val_batch, config.normalize_losses)

    return (probe(k_hi) - probe(k_lo)) / (k_hi - k_lo)


def hypergrad_closed_form(rate: float, dlam, aux_grads, val_grad) -> float:
    """``-rate * sum_j dlam[j] * <aux_grads[j], val_grad>`` on flat vectors."""
    aux_grads = np.atleast_2d(np.asarray(aux_grads, dtype=np.float64))
    return -float(rate) * float(np.asarray(dlam, dtype=np.float64) @ (aux_grads @ np.asarray(val_grad)))


def hypergrad_analytic_h1(params: ModelParams, k: float, batch: Partition, val_batch: Partition,
                          ranking: GeneRanking, config: BilevelConfig) -> float:
    """Exact d(val loss)/dk through one plain gradient step.

    ``-rate * sum_j dlambda_j/dk * <grad L_aux_j(theta), grad L_val(theta+)>``.
    """
    if config.H != 1:
        raise ConfigError(f"analytic hypergradient is defined for H = 1, got H = {config.H}")
    if config.lookahead_optimizer != "sgd":
        raise ConfigError("analytic hypergradient requires an sgd lookahead")
    la = lookahead(params, k, [batch], ranking, config)
    g_val = val_loss_grad(la.params, val_batch, config.normalize_losses)
    if ranking.n == 0:
        return 0.0
    dlam = mask_grad_k(soft_mask(ranking, k, config.tau))
    if config.normalize_losses:
        dlam = dlam / ranking.n
    cache, pred_aux, y_aux = la.aux_cotangents[0]
    cot = pearson_loss_grad(pred_aux, y_aux) * dlam
    d_theta = mlp_backward(cache, np.zeros((batch.n, params.n_pri)), cot)
    inner = sum(float(np.vdot(getattr(d_theta, b), getattr(g_val, b)))
                for b in d_theta.blocks())
    return -config.lookahead_rate * inner


def k_step(state: BilevelState, hypergradient: float, config: BilevelConfig) -> BilevelState:
    if not np.isfinite(hypergradient):
        raise TrainingError("non-finite hypergradient", k=state.k, seed=config.seed)
    g = float(hypergradient)
    if config.k_optimizer == "plain":
        step = config.beta * g
    else:
        state.k_t += 1
        state.k_m = 0.9 * state.k_m + 0.1 * g
        state.k_v = 0.999 * state.k_v + 0.001 * g * g
        m_hat = state.k_m / (1 - 0.9 ** state.k_t)
        v_hat = state.k_v / (1 - 0.999 ** state.k_t)
        step = config.beta * m_hat / (np.sqrt(v_hat) + 1e-8)
    lo, hi = state.k_bounds
    state.k = float(min(max(state.k - step, lo), hi))
    state.k_history.append(state.k)
    state.hypergrad_history.append(g)
    return state


def _sample_train_batches(train: Partition, config: BilevelConfig, rng) -> list[Partition]:
    size = min(config.mini_batch, train.n)
    return [train.take(rng.choice(train.n, size=size, replace=False)) for _ in range(config.H)]


def _next_val_batch(state: BilevelState, val: Partition, config: BilevelConfig) -> Partition:
    size = min(config.mini_batch, val.n)
    if state.val_order is None or state.val_pos + size > state.val_order.size:
        state.val_order = state.rngs["val"].permutation(val.n)
        state.val_pos = 0
    idx = state.val_order[state.val_pos:state.val_pos + size]
    state.val_pos += size
    return val.take(idx)


def k_loop(state: BilevelState, train: Partition, val: Partition, ranking: GeneRanking,
           config: BilevelConfig) -> bool:
    """Run k-steps until k settles. Returns True if it converged within ``max_k_steps``."""
    start = len(state.k_history) - 1
    W = config.k_converge_window
    for _ in range(config.max_k_steps):
        batches = _sample_train_batches(train, config, state.rngs["lookahead"])
        val_batch = _next_val_batch(state, val, config)
        if config.hypergrad_mode == "fd":
            g = hypergrad_fd(state.params, state.k, batches, val_batch, ranking, config,
                             state.k_bounds)
        else:
            g = hypergrad_analytic_h1(state.params, state.k, batches[0], val_batch, ranking,
                                      config)
        if config.commit_lookahead:
            state.params = lookahead(state.params, state.k, batches, ranking, config).params
        k_step(state, g, config)
        hist = state.k_history
        if len(hist) - 1 - start >= W and abs(hist[-1] - hist[-1 - W]) < config.k_converge_tol:
            return True
    return False


@dataclass
class RunResult:
    state: BilevelState
    val_pcc: list[float]
    test_pcc: float | None
    outer_rounds: int
    converged: bool

    def report(self) -> dict:
        s = self.state
        return {
            "k_history": list(s.k_history),
            "effective_k_history": list(s.effective_k_history),
            "val_pcc_history": list(self.val_pcc),
            "final_k": s.k,
            "final_effective_k": s.effective_k_history[-1] if s.effective_k_history else None,
            "test_pcc": self.test_pcc,
            "outer_rounds": self.outer_rounds,
            "converged": self.converged,
            "epochs": s.epochs,
        }


def run(train: Partition, val: Partition, test: Partition | None, ranking: GeneRanking,
        config: BilevelConfig, on_inner_step=None) -> RunResult:
    """Alternate inner phases and k-loops; evaluate the final weights on ``test``.

    The loop ends after the k-loop converges in two consecutive rounds or
    after ``max_outer_rounds``. Each round ends with an inner phase, so the
    returned weights are always fitted to the returned ``k``.
    """
    if ranking.n != train.y_aux.shape[1]:
        raise ConfigError(f"ranking covers {ranking.n} genes, data has {train.y_aux.shape[1]}")
    state = init_state(train, config)
    streak = 0
    converged = False
    rounds = 0
    for rounds in range(1, config.max_outer_rounds + 1):
        state.outer_round = rounds
        inner_phase(state, train, ranking, config, on_step=on_inner_step)
        _record(state, val, ranking, config)
        if not config.k_loop or ranking.n == 0:
            converged = True
            break
        if rounds == config.max_outer_rounds:
            break
        if k_loop(state, train, val, ranking, config):
            streak += 1
        else:
            streak = 0
        if streak >= 2:
            inner_phase(state, train, ranking, config, on_step=on_inner_step)
            _record(state, val, ranking, config)
            converged = True
            break
    test_pcc = evaluate_pcc(state.params, test) if test is not None else None
    return RunResult(state, list(state.val_pcc_history), test_pcc, rounds, converged)


def _record(state: BilevelState, val: Partition, ranking: GeneRanking, config: BilevelConfig):
    vp = evaluate_pcc(state.params, val)
    if not np.isfinite(vp):
        raise TrainingError("non-finite validation PCC", round=state.outer_round, seed=config.seed)
    state.val_pcc_history.append(vp)
    if ranking.n:
        state.effective_k_history.append(effective_k(soft_mask(ranking, state.k, config.tau)))
    log.info("round %d: k=%.4f val_pcc=%.4f", state.outer_round, state.k, vp)


def with_overrides(config: BilevelConfig, **kw) -> BilevelConfig:
    return replace(config, **kw)
