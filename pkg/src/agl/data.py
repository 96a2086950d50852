"""Datasets: a synthetic spatial-transcriptomics benchmark, CSV I/O, log-normalization, folds."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from agl.errors import ConfigError, DataError, ParseError
from agl.hvg import DEFAULT_N_PRIMARY, select_primary

log = logging.getLogger(__name__)

TARGET_LIBRARY_SIZE = 10_000.0
BATCH_COLUMN = "batch"
FOLD_MODES = ("intra_batch_5fold", "leave_one_batch_out")


@dataclass
class ExpressionDataset:
    features: np.ndarray
    expression: np.ndarray
    gene_names: list[str]
    primary_indices: np.ndarray
    auxiliary_indices: np.ndarray
    batch_labels: np.ndarray
    spot_ids: list[str] = field(default_factory=list)
    # generator ground truth, for tests and reports only
    truth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.expression.shape[0]
        if self.features.shape[0] != n or len(self.batch_labels) != n:
            raise DataError("features, expression and batch labels disagree on spot count")
        if np.intersect1d(self.primary_indices, self.auxiliary_indices).size:
            raise DataError("primary and auxiliary gene sets overlap")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.expression))):
            raise DataError("dataset contains non-finite values")
        if not self.spot_ids:
            self.spot_ids = [f"spot{i:05d}" for i in range(n)]

    @property
    def n_spots(self) -> int:
        return self.expression.shape[0]

    @property
    def n_pri(self) -> int:
        return self.primary_indices.size

    @property
    def n_aux(self) -> int:
        return self.auxiliary_indices.size

    @property
    def y_pri(self) -> np.ndarray:
        return self.expression[:, self.primary_indices]

    @property
    def y_aux(self) -> np.ndarray:
        return self.expression[:, self.auxiliary_indices]


@dataclass(frozen=True)
class SyntheticSpec:
    """Latent-factor benchmark.

    Every gene's log-level is ``base + amplitude * (signal + noise)``. Primary
    genes and informative auxiliaries read out the spot latent through random
    unit directions; informative amplitudes decay linearly from
    ``aux_amplitude`` to ``aux_amplitude_min`` with gene index, so the strongest
    sit at the top of the HVG ranking. Noise auxiliaries carry no signal, vary
    at ``noise_amplitude`` and are zero-inflated.
    """

    n_spots: int = 2000
    feature_dim: int = 256
    latent_dim: int = 8
    n_pri: int = 50
    n_aux_informative: int = 50
    n_aux_noise: int = 150
    dropout_rate: float = 0.02
    noise_scale: float = 1.0
    feature_noise: float = 1.0
    aux_noise: float = 0.7
    pri_amplitude: float = 0.8
    aux_amplitude: float = 1.2
    aux_amplitude_min: float = 0.8
    noise_amplitude: float = 0.3
    base_low: float = 1.0
    base_high: float = 3.0
    n_batches: int = 4
    batch_effect: float = 0.0
    latent_warp: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.n_spots, self.feature_dim, self.latent_dim, self.n_pri) < 1:
            raise ConfigError("n_spots, feature_dim, latent_dim and n_pri must be positive")
        if self.n_aux_informative < 0 or self.n_aux_noise < 0:
            raise ConfigError("auxiliary gene counts must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.n_spots < 2 or self.n_batches < 1 or self.n_batches > self.n_spots:
            raise ConfigError("need n_spots >= 2 and 1 <= n_batches <= n_spots")
        if min(self.noise_scale, self.feature_noise, self.aux_noise, self.noise_amplitude,
               self.batch_effect) < 0:
            raise ConfigError("noise scales must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_columns(rng, rows, cols):
    m = rng.standard_normal((rows, cols))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> ExpressionDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, L = spec.n_spots, spec.latent_dim
    n_inf, n_noise = spec.n_aux_informative, spec.n_aux_noise
    n_total = spec.n_pri + n_inf + n_noise

    z = rng.standard_normal((n, L))
    mixing = rng.standard_normal((L, spec.feature_dim)) / np.sqrt(L)
    features = z @ mixing + spec.feature_noise * rng.standard_normal((n, spec.feature_dim))

    base = rng.uniform(spec.base_low, spec.base_high, size=n_total)
    batch = np.arange(n) * spec.n_batches // n
    batch_shift = spec.batch_effect * rng.standard_normal((spec.n_batches, n_total))

    # gene programs read a warped latent; features see the latent linearly
    if spec.latent_warp > 0:
        program = np.sin(spec.latent_warp * z) / np.sqrt(0.5 * (1 - np.exp(-2 * spec.latent_warp ** 2)))
    else:
        program = z
    pri_signal = program @ _unit_columns(rng, L, spec.n_pri)
    pri = spec.pri_amplitude * (pri_signal + spec.noise_scale * rng.standard_normal((n, spec.n_pri)))

    amp = np.linspace(spec.aux_amplitude, spec.aux_amplitude_min, n_inf) if n_inf else np.zeros(0)
    inf_signal = program @ _unit_columns(rng, L, n_inf) if n_inf else np.zeros((n, 0))
    inf = amp * (inf_signal + spec.aux_noise * rng.standard_normal((n, n_inf)))

    noise = spec.noise_amplitude * rng.standard_normal((n, n_noise))

    level = np.concatenate([pri, inf, noise], axis=1) + base + batch_shift[batch]
    raw = np.exp(level)
    drop = rng.random((n, n_noise)) < spec.dropout_rate
    raw[:, spec.n_pri + n_inf:][drop] = 0.0
    expression = log_normalize(raw)

    names = ([f"pri{j:03d}" for j in range(spec.n_pri)]
             + [f"inf{j:03d}" for j in range(n_inf)]
             + [f"noise{j:03d}" for j in range(n_noise)])
    aux_idx = np.arange(spec.n_pri, n_total)
    return ExpressionDataset(
        features=features,
        expression=expression,
        gene_names=names,
        primary_indices=np.arange(spec.n_pri),
        auxiliary_indices=aux_idx,
        batch_labels=np.array([f"slide{b}" for b in batch]),
        truth={
            "informative": np.concatenate([np.ones(n_inf, bool), np.zeros(n_noise, bool)]),
            "amplitude": np.concatenate([amp, np.zeros(n_noise)]),
            "latent": z,
            "spec": spec.to_dict(),
        },
    )


def log_normalize(raw_counts, target: float = TARGET_LIBRARY_SIZE) -> np.ndarray:
    """Scale each spot to ``target`` total counts, then ``log1p``."""
    raw = np.asarray(raw_counts, dtype=np.float64)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise DataError("raw counts must be finite and non-negative")
    totals = raw.sum(axis=1, keepdims=True)
    empty = np.flatnonzero(totals[:, 0] <= 0)
    if empty.size:
        raise DataError(f"spots with zero total counts: {empty.tolist()}")
    return np.log1p(raw / totals * target)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _read_table(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc})") from exc
    if not rows:
        raise ParseError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
    return header, body


def _parse_block(path, body, first_col, header):
    out = np.empty((len(body), len(header) - first_col))
    for i, row in enumerate(body):
        for j in range(first_col, len(header)):
            try:
                out[i, j - first_col] = float(row[j])
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric cell {row[j]!r} at row {i + 2}, column {j + 1} "
                    f"({header[j]})") from None
    if not np.all(np.isfinite(out)):
        raise ParseError(f"{path}: non-finite values")
    return out


def load_csv(expr_path, features_path, n_pri: int = DEFAULT_N_PRIMARY,
             raw_counts: bool = False) -> ExpressionDataset:
    """Load an expression table and a spot-aligned feature table.

    Expression CSV: ``spot_id[,batch],gene...``; features CSV: ``spot_id,f...``.
    Spots are sorted by id. Primary genes are the top ``n_pri`` HVGs.
    """
    expr_path, features_path = Path(expr_path), Path(features_path)
    eh, eb = _read_table(expr_path)
    fh, fb = _read_table(features_path)
    has_batch = len(eh) > 1 and eh[1] == BATCH_COLUMN
    first = 2 if has_batch else 1
    gene_names = eh[first:]
    if not gene_names:
        raise ParseError(f"{expr_path}: no gene columns")
    if len(fh) < 2:
        raise ParseError(f"{features_path}: no feature columns")

    e_ids = [r[0] for r in eb]
    f_ids = [r[0] for r in fb]
    for ids, path in ((e_ids, expr_path), (f_ids, features_path)):
        seen = set()
        for i, s in enumerate(ids, start=2):
            if s in seen:
                raise ParseError(f"{path}: duplicate spot id {s!r} at row {i}")
            seen.add(s)
    missing_f = sorted(set(e_ids) - set(f_ids))
    missing_e = sorted(set(f_ids) - set(e_ids))
    if missing_f:
        raise ParseError(f"{features_path}: missing spot ids {missing_f}")
    if missing_e:
        raise ParseError(f"{expr_path}: missing spot ids {missing_e}")

    expr = _parse_block(expr_path, eb, first, eh)
    feats = _parse_block(features_path, fb, 1, fh)
    order = sorted(range(len(e_ids)), key=lambda i: e_ids[i])
    f_pos = {s: i for i, s in enumerate(f_ids)}
    spot_ids = [e_ids[i] for i in order]
    expr = expr[order]
    feats = feats[[f_pos[s] for s in spot_ids]]
    batch = np.array([eb[i][1] for i in order] if has_batch else ["batch0"] * len(order))
    if raw_counts:
        expr = log_normalize(expr)
    if expr.shape[0] < 2:
        raise DataError(f"{expr_path}: need at least 2 spots")
    primary, auxiliary = select_primary(expr, n_pri)
    return ExpressionDataset(feats, expr, list(gene_names), primary, auxiliary, batch, spot_ids)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(dataset: ExpressionDataset, expr_path, features_path, with_batch: bool = True):
    """Inverse of :func:`load_csv` (values written with round-trip precision)."""
    expr_path, features_path = Path(expr_path), Path(features_path)
    with open(expr_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id"] + ([BATCH_COLUMN] if with_batch else []) + dataset.gene_names)
        for i, sid in enumerate(dataset.spot_ids):
            lead = [sid] + ([dataset.batch_labels[i]] if with_batch else [])
            w.writerow(lead + [_fmt(v) for v in dataset.expression[i]])
    with open(features_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id"] + [f"f{j}" for j in range(dataset.features.shape[1])])
        for i, sid in enumerate(dataset.spot_ids):
            w.writerow([sid] + [_fmt(v) for v in dataset.features[i]])


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    test_batch: str | None = None


@dataclass(frozen=True)
class FoldSplit:
    mode: str
    folds: tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def split_folds(dataset: ExpressionDataset, mode: str = "intra_batch_5fold",
                n_folds: int = 5, seed: int = 0) -> FoldSplit:
    """Intra mode: chunk ``f`` is test, chunk ``f+1`` is validation, the rest train (3:1:1).

    Inter mode: each batch label is held out as test once; the remaining spots
    are split 3:1 into train and validation.
    """
    rng = np.random.default_rng(seed)
    n = dataset.n_spots
    if mode == "intra_batch_5fold":
        if n_folds < 3 or n < n_folds:
            raise ConfigError(f"intra mode needs n_folds >= 3 and at least {n_folds} spots")
        chunks = np.array_split(rng.permutation(n), n_folds)
        folds = []
        for f in range(n_folds):
            v = (f + 1) % n_folds
            train = np.concatenate([c for i, c in enumerate(chunks) if i not in (f, v)])
            folds.append(Fold(np.sort(train), np.sort(chunks[v]), np.sort(chunks[f])))
        return FoldSplit(mode, tuple(folds))
    if mode == "leave_one_batch_out":
        labels = np.asarray(dataset.batch_labels)
        batches = sorted(set(labels.tolist()))
        if len(batches) < 2:
            raise ConfigError("leave-one-batch-out needs at least 2 batch labels")
        folds = []
        for b in batches:
            test = np.flatnonzero(labels == b)
            rest = rng.permutation(np.flatnonzero(labels != b))
            n_val = max(1, int(round(rest.size / 4)))
            folds.append(Fold(np.sort(rest[n_val:]), np.sort(rest[:n_val]), test, test_batch=b))
        return FoldSplit(mode, tuple(folds))
    raise ConfigError(f"unknown fold mode {mode!r}; expected one of {FOLD_MODES}")
