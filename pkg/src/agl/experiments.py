"""Experiment harness: the four training methods, cross-validated runs, the subset sweep and reports.

Every method goes through the same engine entry points, so differences between
methods come only from the auxiliary weighting:

* ``pgl``        primary genes only (auxiliary columns removed);
* ``agl_all``    every auxiliary gene, cut-off pinned at ``k = 1``;
* ``agl_random`` a seeded random auxiliary subset with hard 0/1 weights;
* ``agl_dkgsb``  learned cut-off over the HVG ranking.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from agl.bilevel import (
    BilevelConfig,
    Partition,
    RunResult,
    evaluate_pcc,
    fit_fixed_mask,
    init_state,
    run,
)
from agl.data import (
    FOLD_MODES,
    ExpressionDataset,
    Fold,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    split_folds,
)
from agl.errors import ConfigError, ReportError, TrainingError
from agl.hvg import DEFAULT_N_PRIMARY, GeneRanking, hvg_ranking

log = logging.getLogger(__name__)

METHODS = ("pgl", "agl_all", "agl_random", "agl_dkgsb")
SELECTORS = ("hvg", "random")
FORMAT_VERSION = 1
DEFAULT_SWEEP_SIZES = (50, 100, 150)
# real-data subset sizes that the synthetic sweep sizes stand in for
REAL_SIZE_ANALOG = {50: 5000, 100: 10000, 150: 15000}

# Frozen hyperparameters for the synthetic benchmark. BilevelConfig's own
# defaults are the reference values for full-size data; at 2,000 spots they
# would need tens of thousands of epochs.
BENCHMARK_BILEVEL = BilevelConfig(
    alpha=1e-3, max_epochs=200, hidden_dim=14,
    k_optimizer="adam", beta=0.01, lookahead_lr=6e-4,
    max_k_steps=300, max_outer_rounds=6,
)
PRESETS = {"reference": BilevelConfig(), "benchmark": BENCHMARK_BILEVEL}


@dataclass(frozen=True)
class RunConfig:
    method: str = "agl_dkgsb"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    # CSV input replaces the synthetic benchmark when both paths are set
    expr_path: str | None = None
    features_path: str | None = None
    n_pri: int = DEFAULT_N_PRIMARY
    raw_counts: bool = False
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    fold_mode: str = "intra_batch_5fold"
    n_folds: int = 5
    split_seed: int = 0
    folds: tuple[int, ...] | None = None
    subset_size: int | None = None
    subset_seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.fold_mode not in FOLD_MODES:
            raise ConfigError(f"unknown fold mode {self.fold_mode!r}; expected one of {FOLD_MODES}")
        if (self.expr_path is None) != (self.features_path is None):
            raise ConfigError("expr_path and features_path must be given together")
        if self.method == "agl_random" and (self.subset_size is None or self.subset_size < 1):
            raise ConfigError("agl_random needs a positive subset_size")
        if self.folds is not None and any(f < 0 for f in self.folds):
            raise ConfigError("fold indices must be non-negative")
        self.bilevel.validate()
        if self.expr_path is None:
            self.synthetic.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = None if self.folds is None else list(self.folds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            if "synthetic" in d:
                d["synthetic"] = SyntheticSpec(**(d["synthetic"] or {}))
            if "bilevel" in d:
                d["bilevel"] = BilevelConfig(**(d["bilevel"] or {}))
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None
        if d.get("folds") is not None:
            d["folds"] = tuple(int(f) for f in d["folds"])
        return cls(**d)


def load_dataset(cfg: RunConfig) -> ExpressionDataset:
    if cfg.expr_path is not None:
        return load_csv(cfg.expr_path, cfg.features_path, cfg.n_pri, cfg.raw_counts)
    return generate_synthetic(cfg.synthetic)


def fold_partitions(ds: ExpressionDataset, fold: Fold):
    full = Partition(ds.features, ds.y_pri, ds.y_aux)
    return full.take(fold.train), full.take(fold.val), full.take(fold.test)


def aux_ranking(train: Partition) -> GeneRanking:
    """HVG order of the auxiliary genes, computed on training spots only."""
    if train.y_aux.shape[1] == 0:
        return GeneRanking.from_order(np.zeros(0, dtype=np.int64))
    return hvg_ranking(train.y_aux)


def random_subset(n_aux: int, size: int, seed: int, fold: int) -> np.ndarray:
    if not 1 <= size <= n_aux:
        raise ConfigError(f"subset size must be in [1, {n_aux}], got {size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, fold, size]))
    return np.sort(rng.choice(n_aux, size=size, replace=False))


def hvg_subset(ranking: GeneRanking, size: int) -> np.ndarray:
    if not 1 <= size <= ranking.n:
        raise ConfigError(f"subset size must be in [1, {ranking.n}], got {size}")
    return np.sort(ranking.ordered_ids[:size])


@dataclass
class FoldResult:
    fold: int
    test_pcc: float
    val_pcc: float
    epochs: int
    k_history: list[float] = field(default_factory=list)
    effective_k_history: list[int] = field(default_factory=list)
    val_pcc_history: list[float] = field(default_factory=list)
    hypergrad_history: list[float] = field(default_factory=list)
    train_loss_history: list[float] = field(default_factory=list)
    subset: list[int] | None = None
    test_batch: str | None = None
    wall_clock_s: float = 0.0

    @classmethod
    def from_run(cls, fold: int, res: RunResult, **kw) -> "FoldResult":
        s = res.state
        return cls(fold=fold, test_pcc=float(res.test_pcc), val_pcc=float(res.val_pcc[-1]),
                   epochs=s.epochs, k_history=list(s.k_history),
                   effective_k_history=[int(e) for e in s.effective_k_history],
                   val_pcc_history=list(res.val_pcc), hypergrad_history=list(s.hypergrad_history),
                   train_loss_history=list(s.train_loss_history), **kw)


def train_fixed_subset(train: Partition, val: Partition, test: Partition, columns,
                       config: BilevelConfig, fold: int) -> FoldResult:
    """Train with a hard auxiliary subset (weight 1 on ``columns``, absent elsewhere)."""
    columns = np.asarray(columns, dtype=np.int64)
    sub = train.select_aux(columns)
    state = init_state(sub, config)
    fit = fit_fixed_mask(state.params, state.inner_opt, sub, np.ones(columns.size), config,
                         state.rngs["shuffle"])
    val_pcc = evaluate_pcc(fit.params, val)
    return FoldResult(fold=fold, test_pcc=evaluate_pcc(fit.params, test), val_pcc=val_pcc,
                      epochs=fit.epochs, val_pcc_history=[val_pcc],
                      train_loss_history=list(fit.epoch_losses), subset=columns.tolist())


def run_fold(ds: ExpressionDataset, fold: Fold, index: int, cfg: RunConfig) -> FoldResult:
    t0 = time.perf_counter()
    train, val, test = fold_partitions(ds, fold)
    bcfg = cfg.bilevel
    try:
        if cfg.method == "pgl":
            res = run(train.drop_aux(), val.drop_aux(), test.drop_aux(), aux_ranking(train.drop_aux()),
                      replace(bcfg, k_loop=False, k_init=1.0))
            out = FoldResult.from_run(index, res)
        elif cfg.method == "agl_all":
            res = run(train, val, test, aux_ranking(train), replace(bcfg, k_loop=False, k_init=1.0))
            out = FoldResult.from_run(index, res)
        elif cfg.method == "agl_dkgsb":
            res = run(train, val, test, aux_ranking(train), bcfg)
            out = FoldResult.from_run(index, res)
        else:
            cols = random_subset(ds.n_aux, cfg.subset_size, cfg.subset_seed, index)
            out = train_fixed_subset(train, val, test, cols, bcfg, index)
    except TrainingError as exc:
        raise TrainingError(str(exc), fold=index, seed=bcfg.seed) from exc
    out.test_batch = fold.test_batch
    out.wall_clock_s = time.perf_counter() - t0
    log.info("%s fold %d: test PCC %.4f", cfg.method, index, out.test_pcc)
    return out


def selected_folds(split, cfg: RunConfig) -> list[int]:
    idx = list(range(len(split))) if cfg.folds is None else list(cfg.folds)
    bad = [i for i in idx if i >= len(split)]
    if bad:
        raise ConfigError(f"fold indices {bad} out of range for {len(split)} folds")
    return idx


def summarize(values) -> dict:
    """Mean and sample standard deviation; the deviation is omitted below two values."""
    vals = [float(v) for v in values]
    out = {"n": len(vals), "mean": float(np.mean(vals)) if vals else None}
    if len(vals) >= 2:
        out["std"] = float(np.std(vals, ddof=1))
    return out


@dataclass
class RunReport:
    method: str
    config: dict
    folds: list[FoldResult]
    wall_clock_s: float = 0.0
    format_version: int = FORMAT_VERSION

    @property
    def test_pccs(self) -> list[float]:
        return [f.test_pcc for f in self.folds]

    def summary(self) -> dict:
        return summarize(self.test_pccs)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "method": self.method,
            "summary": self.summary(),
            "wall_clock_s": self.wall_clock_s,
            "config": self.config,
            "folds": [asdict(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict, source: str = "<report>") -> "RunReport":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ReportError(f"{source}: format_version {version!r}, expected {FORMAT_VERSION}")
        try:
            folds = [FoldResult(**f) for f in d["folds"]]
            return cls(d["method"], d["config"], folds, d.get("wall_clock_s", 0.0), version)
        except (KeyError, TypeError) as exc:
            raise ReportError(f"{source}: malformed report ({exc})") from None

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunReport":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportError(f"{path}: cannot read report ({exc})") from None
        return cls.from_dict(d, str(path))


def train_cv(cfg: RunConfig, dataset: ExpressionDataset | None = None) -> RunReport:
    """Run the configured method on every selected fold."""
    cfg.validate()
    t0 = time.perf_counter()
    ds = load_dataset(cfg) if dataset is None else dataset
    if cfg.method == "agl_random" and cfg.subset_size > ds.n_aux:
        raise ConfigError(f"subset_size {cfg.subset_size} exceeds {ds.n_aux} auxiliary genes")
    split = split_folds(ds, cfg.fold_mode, cfg.n_folds, cfg.split_seed)
    results = [run_fold(ds, split[i], i, cfg) for i in selected_folds(split, cfg)]
    return RunReport(cfg.method, cfg.to_dict(), results, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def run_sweep(cfg: RunConfig, sizes=DEFAULT_SWEEP_SIZES, selectors=SELECTORS,
              dataset: ExpressionDataset | None = None) -> dict:
    """ΔPCC against the primary-only baseline for fixed hard subsets of each size."""
    cfg.validate()
    for s in selectors:
        if s not in SELECTORS:
            raise ConfigError(f"unknown selector {s!r}; expected one of {SELECTORS}")
    t0 = time.perf_counter()
    ds = load_dataset(cfg) if dataset is None else dataset
    bad = [s for s in sizes if not 1 <= s <= ds.n_aux]
    if bad:
        raise ConfigError(f"subset sizes {bad} outside [1, {ds.n_aux}]")
    split = split_folds(ds, cfg.fold_mode, cfg.n_folds, cfg.split_seed)
    fold_ids = selected_folds(split, cfg)
    baseline, deltas = {}, {(s, sel): [] for s in sizes for sel in selectors}
    for i in fold_ids:
        train, val, test = fold_partitions(ds, split[i])
        base = run_fold(ds, split[i], i, replace(cfg, method="pgl")).test_pcc
        baseline[i] = base
        ranking = aux_ranking(train)
        for size in sizes:
            for sel in selectors:
                cols = (hvg_subset(ranking, size) if sel == "hvg"
                        else random_subset(ds.n_aux, size, cfg.subset_seed, i))
                r = train_fixed_subset(train, val, test, cols, cfg.bilevel, i)
                deltas[(size, sel)].append(r.test_pcc - base)
    rows = []
    for (size, sel), vals in deltas.items():
        rows.append({"size": size, "selector": sel, "real_data_analog": REAL_SIZE_ANALOG.get(size),
                     "delta_pcc": vals, "summary": summarize(vals)})
    return {
        "format_version": FORMAT_VERSION,
        "kind": "sweep",
        "folds": fold_ids,
        "baseline_test_pcc": [baseline[i] for i in fold_ids],
        "rows": rows,
        "size_analog_note": "synthetic sizes 50/100/150 stand in for real-data subsets "
                            "of 5,000/10,000/15,000 genes",
        "wall_clock_s": time.perf_counter() - t0,
        "config": cfg.to_dict(),
    }


# ---------------------------------------------------------------------------
# Traces and aggregation
# ---------------------------------------------------------------------------


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_traces(report: RunReport, out_dir) -> list[Path]:
    """Per-fold CSV traces: k-steps, per-round summaries and per-epoch training loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in report.folds:
        ks = out_dir / f"fold{f.fold}_k.csv"
        hg = [None] + list(f.hypergrad_history)
        _write_rows(ks, ["step", "k", "hypergradient"],
                    [[i, repr(k), "" if g is None else repr(g)]
                     for i, (k, g) in enumerate(zip(f.k_history, hg))])
        rounds = out_dir / f"fold{f.fold}_rounds.csv"
        eff = list(f.effective_k_history) + [""] * (len(f.val_pcc_history) - len(f.effective_k_history))
        _write_rows(rounds, ["round", "val_pcc", "effective_k"],
                    [[i + 1, repr(v), e] for i, (v, e) in enumerate(zip(f.val_pcc_history, eff))])
        losses = out_dir / f"fold{f.fold}_loss.csv"
        _write_rows(losses, ["epoch", "train_loss"],
                    [[i + 1, repr(v)] for i, v in enumerate(f.train_loss_history)])
        written += [ks, rounds, losses]
    return written


def _fmt_stat(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def aggregate(reports: list[tuple[str, RunReport]]) -> dict:
    """One row per run: method, fold count, mean ± std of test PCC, per-fold values."""
    if not reports:
        raise ConfigError("need at least one run report")
    rows, series = [], {}
    for name, rep in reports:
        s = rep.summary()
        rows.append({"run": name, "method": rep.method, "n_folds": s["n"], "mean_test_pcc": s["mean"],
                     "std_test_pcc": s.get("std"), "fold_test_pcc": rep.test_pccs})
        if any(len(f.k_history) > 1 for f in rep.folds):
            series[name] = {str(f.fold): {"k": f.k_history, "effective_k": f.effective_k_history}
                            for f in rep.folds}
    return {"format_version": FORMAT_VERSION, "rows": rows, "k_trajectories": series}


def write_table(table: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "table.csv", out_dir / "table.json"
    _write_rows(csv_path, ["run", "method", "n_folds", "mean_test_pcc", "std_test_pcc", "fold_test_pcc"],
                [[r["run"], r["method"], r["n_folds"], _fmt_stat(r["mean_test_pcc"]),
                  _fmt_stat(r["std_test_pcc"]), ";".join(repr(v) for v in r["fold_test_pcc"])]
                 for r in table["rows"]])
    json_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def load_reports(run_dirs) -> list[tuple[str, RunReport]]:
    """Read ``report.json`` from each directory; every version mismatch is reported at once."""
    out, bad = [], []
    for d in run_dirs:
        path = Path(d) / "report.json" if Path(d).is_dir() else Path(d)
        try:
            out.append((Path(d).name, RunReport.load(path)))
        except ReportError as exc:
            bad.append(str(exc))
    if bad:
        raise ReportError("; ".join(bad))
    return out
