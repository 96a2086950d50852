"""Per-gene Pearson correlation loss, the masked training objective, and the PCC metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from agl.errors import ConfigError, DataError, EvaluationError

log = logging.getLogger(__name__)

EPS_VAR = 1e-8
EPS_GUARD = 1e-12


@dataclass
class GeneLossReport:
    per_gene_loss: np.ndarray
    mean_pred: np.ndarray
    mean_true: np.ndarray
    valid_flags: np.ndarray

    @property
    def total(self) -> float:
        return float(self.per_gene_loss.sum())


def _check(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ConfigError(f"pred shape {pred.shape} != true shape {true.shape}")
    if pred.shape[0] < 2:
        raise DataError(f"Pearson loss needs at least 2 rows, got {pred.shape[0]}")
    return pred, true


def _moments(pred, true):
    mp = pred.mean(axis=0)
    mt = true.mean(axis=0)
    pc = pred - mp
    tc = true - mt
    norm_p = np.sqrt((pc * pc).sum(axis=0))
    norm_t = np.sqrt((tc * tc).sum(axis=0))
    dot = (pc * tc).sum(axis=0)
    valid = (norm_p >= EPS_VAR) & (norm_t >= EPS_VAR)
    return mp, mt, pc, tc, norm_p, norm_t, dot, valid


def pearson_loss(pred, true) -> GeneLossReport:
    """``1 - r`` per column. Degenerate columns are flagged and score exactly 1."""
    pred, true = _check(pred, true)
    mp, mt, _, _, norm_p, norm_t, dot, valid = _moments(pred, true)
    loss = np.ones(pred.shape[1])
    denom = norm_p * norm_t + EPS_GUARD
    loss[valid] = 1.0 - dot[valid] / denom[valid]
    return GeneLossReport(loss, mp, mt, valid)


def pearson_loss_grad(pred, true) -> np.ndarray:
    """Gradient of each column's guarded loss w.r.t. that column of ``pred``."""
    pred, true = _check(pred, true)
    _, _, pc, tc, norm_p, norm_t, dot, valid = _moments(pred, true)
    grad = np.zeros_like(pred)
    if not valid.any():
        return grad
    denom = norm_p * norm_t + EPS_GUARD
    v = valid
    # d(dot)/dpred = tc, d(norm_p)/dpred = pc / norm_p (centering is a projection)
    grad[:, v] = (-tc[:, v] / denom[v]
                  + pc[:, v] * (dot[v] * norm_t[v] / (norm_p[v] * denom[v] ** 2)))
    return grad


@dataclass
class TotalLoss:
    value: float
    primary: float
    auxiliary: float
    grad_pri: np.ndarray
    grad_aux: np.ndarray


def total_loss(pred_pri, true_pri, pred_aux, true_aux, lambdas, normalize: bool = False) -> TotalLoss:
    """Primary losses plus mask-weighted auxiliary losses, with output cotangents.

    Losses are summed over genes. ``normalize=True`` divides each group by its
    gene count instead.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    n_aux = np.shape(pred_aux)[1]
    if lambdas.shape != (n_aux,):
        raise ConfigError(f"mask length {lambdas.shape} != n_aux {n_aux}")
    pri_scale = 1.0 / np.shape(pred_pri)[1] if normalize else 1.0
    aux_scale = 1.0 / n_aux if normalize and n_aux else 1.0

    pri = pearson_loss(pred_pri, true_pri)
    grad_pri = pearson_loss_grad(pred_pri, true_pri) * pri_scale
    primary = pri.total * pri_scale

    grad_aux = np.zeros(np.shape(pred_aux))
    auxiliary = 0.0
    active = np.flatnonzero(lambdas)
    if active.size:
        pa = np.asarray(pred_aux)[:, active]
        ta = np.asarray(true_aux)[:, active]
        w = lambdas[active] * aux_scale
        aux = pearson_loss(pa, ta)
        auxiliary = float(aux.per_gene_loss @ w)
        grad_aux[:, active] = pearson_loss_grad(pa, ta) * w
    return TotalLoss(primary + auxiliary, primary, auxiliary, grad_pri, grad_aux)


def per_gene_pcc(pred, true) -> np.ndarray:
    """Per-column Pearson r; NaN where either column has (near) zero variance."""
    pred, true = _check(pred, true)
    _, _, _, _, norm_p, norm_t, dot, valid = _moments(pred, true)
    r = np.full(pred.shape[1], np.nan)
    r[valid] = dot[valid] / (norm_p[valid] * norm_t[valid])
    return np.clip(r, -1.0, 1.0)


def pcc_metric(pred, true) -> float:
    """Mean PCC over genes, computed on a whole evaluation set."""
    r = per_gene_pcc(pred, true)
    ok = ~np.isnan(r)
    if not ok.any():
        raise EvaluationError("every gene has zero variance; PCC undefined")
    if not ok.all():
        log.warning("excluded %d zero-variance genes from PCC: %s",
                    int((~ok).sum()), np.flatnonzero(~ok).tolist())
    return float(r[ok].mean())
