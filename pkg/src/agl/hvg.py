"""Highly-variable-gene ranking: dispersion z-scored within mean-expression bins.

Pinned choices: population variance, equal-frequency bins over a stable
``(mean, gene_index)`` sort, zero dispersion for zero-mean genes, score 0 in
bins whose dispersion spread is zero, ascending gene index breaks every tie.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from agl.errors import ConfigError, DataError

N_BINS = 20
DEFAULT_N_PRIMARY = 50


@dataclass(frozen=True)
class HvgScores:
    mean: np.ndarray
    dispersion: np.ndarray
    bin_index: np.ndarray
    score: np.ndarray


@dataclass(frozen=True)
class GeneRanking:
    """``ordered_ids[t]`` is the gene at rank ``t + 1``; ``rank_of`` is its inverse."""

    ordered_ids: np.ndarray
    rank_of: np.ndarray

    @property
    def n(self) -> int:
        return self.ordered_ids.size

    @property
    def normalized_rank(self) -> np.ndarray:
        return self.rank_of / float(self.n)

    @classmethod
    def from_order(cls, ordered_ids) -> "GeneRanking":
        ordered_ids = np.asarray(ordered_ids, dtype=np.int64)
        rank_of = np.empty_like(ordered_ids)
        rank_of[ordered_ids] = np.arange(1, ordered_ids.size + 1)
        return cls(ordered_ids, rank_of)


def _column_sums(sorted_rows: np.ndarray) -> np.ndarray:
    acc = np.zeros(sorted_rows.shape[1])
    for row in sorted_rows:
        acc += row
    return acc


def _seq_sum(values) -> float:
    acc = 0.0
    for v in values:
        acc += v
    return acc


def mean_dispersion(expr) -> tuple[np.ndarray, np.ndarray]:
    """Per-gene mean and population-variance / mean.

    Each column is summed in ascending value order, so the statistics depend on
    the multiset of values only and equal genes tie exactly.
    """
    expr = np.asarray(expr, dtype=np.float64)
    if expr.ndim != 2 or expr.shape[0] < 2:
        raise DataError(f"need at least 2 spots to compute dispersion, got shape {expr.shape}")
    n = expr.shape[0]
    srt = np.sort(expr, axis=0)
    mean = _column_sums(srt) / n
    dev = srt - mean
    var = _column_sums(dev * dev) / n
    disp = np.zeros_like(mean)
    pos = mean > 0
    disp[pos] = var[pos] / mean[pos]
    return mean, disp


def assign_bins(means, n_bins: int = N_BINS) -> np.ndarray:
    """Gene at sorted position ``p`` (of ``n``) lands in bin ``floor(p * n_bins / n)``."""
    means = np.asarray(means, dtype=np.float64)
    n = means.size
    if n_bins < 1 or n < 1:
        raise ConfigError(f"need n_bins >= 1 and at least one gene (n_bins={n_bins}, n={n})")
    order = np.lexsort((np.arange(n), means))
    bins = np.empty(n, dtype=np.int64)
    bins[order] = (np.arange(n) * n_bins) // n
    return bins


def zscore_bins(dispersions, bin_index) -> np.ndarray:
    disp = np.asarray(dispersions, dtype=np.float64)
    bin_index = np.asarray(bin_index)
    score = np.zeros_like(disp)
    for b in np.unique(bin_index):
        members = np.flatnonzero(bin_index == b)
        vals = disp[members]
        if np.all(vals == vals[0]):
            continue
        mu = _seq_sum(vals) / vals.size
        dev = vals - mu
        sd = np.sqrt(_seq_sum(dev * dev) / vals.size)
        score[members] = dev / sd
    return score


def rank_genes(scores) -> GeneRanking:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("HVG scores must be finite")
    n = scores.size
    order = np.lexsort((np.arange(n), -scores))
    return GeneRanking.from_order(order)


def hvg_scores(expr, n_bins: int = N_BINS) -> HvgScores:
    mean, disp = mean_dispersion(expr)
    bins = assign_bins(mean, n_bins)
    return HvgScores(mean, disp, bins, zscore_bins(disp, bins))


def hvg_ranking(expr, n_bins: int = N_BINS) -> GeneRanking:
    """Rank the columns of ``expr`` by HVG score, best first."""
    return rank_genes(hvg_scores(expr, n_bins).score)


def select_primary(expr_all, n_pri: int = DEFAULT_N_PRIMARY, n_bins: int = N_BINS):
    """Top ``n_pri`` HVGs become primary targets; the rest (ascending index) are auxiliary."""
    n_total = np.shape(expr_all)[1]
    if n_pri < 1 or n_pri >= n_total:
        raise ConfigError(f"n_pri must be in [1, {n_total - 1}], got {n_pri}")
    ranking = hvg_ranking(expr_all, n_bins)
    primary = np.sort(ranking.ordered_ids[:n_pri])
    auxiliary = np.setdiff1d(np.arange(n_total), primary)
    return primary, auxiliary
