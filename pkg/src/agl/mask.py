"""Temperature-controlled soft top-k mask over normalized HVG ranks.

A gene at normalized rank ``r`` (rank / n_aux, so the best gene sits at
``1/n_aux`` and the worst at 1) receives weight ``sigmoid((k - r) / tau)``.
This is the two-exponential quotient ``e^(k/tau) / (e^(r/tau) + e^(k/tau))``
rewritten so it never overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from agl.errors import ConfigError
from agl.hvg import GeneRanking


@dataclass(frozen=True)
class SoftMask:
    k: float
    tau: float
    normalized_rank: np.ndarray
    lambdas: np.ndarray

    @property
    def n_aux(self) -> int:
        return self.lambdas.size


def _check_k(k, tau=None):
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"k must lie in (0, 1], got {k}")
    if tau is not None and not tau > 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")


def soft_mask(ranking: GeneRanking, k: float, tau: float) -> SoftMask:
    _check_k(k, tau)
    r = ranking.normalized_rank
    return SoftMask(float(k), float(tau), r, expit((k - r) / tau))


def mask_grad_k(mask: SoftMask) -> np.ndarray:
    """d lambda / d k = lambda (1 - lambda) / tau, evaluated without cancellation."""
    z = (mask.k - mask.normalized_rank) / mask.tau
    return expit(z) * expit(-z) / mask.tau


def hard_mask(ranking: GeneRanking, k: float) -> np.ndarray:
    _check_k(k)
    return (ranking.normalized_rank <= k).astype(np.float64)


def effective_k(mask: SoftMask) -> int:
    """Number of genes weighted above one half, i.e. ranked strictly inside ``k``."""
    # compare ranks, not weights: sigmoid of a tiny positive margin rounds to 0.5
    return int(np.count_nonzero(mask.normalized_rank < mask.k))
