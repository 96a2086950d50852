"""Command-line interface: ``agl rank | train | sweep | report``.

Settings are layered: built-in preset < JSON config file < command-line flags.
Flags mirror the fields of RunConfig, BilevelConfig (same names) and
SyntheticSpec (prefixed ``--syn-``). AGL_OUTPUT_DIR sets the default output
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from agl.bilevel import BilevelConfig
from agl.data import FOLD_MODES, SyntheticSpec
from agl.errors import AglError, ConfigError, DataError
from agl.experiments import (
    METHODS,
    PRESETS,
    SELECTORS,
    DEFAULT_SWEEP_SIZES,
    RunConfig,
    aggregate,
    load_dataset,
    load_reports,
    run_sweep,
    train_cv,
    write_table,
    write_traces,
)
from agl.hvg import hvg_scores, rank_genes

log = logging.getLogger("agl")

OUTPUT_ENV = "AGL_OUTPUT_DIR"
DEFAULT_OUTPUT = "agl_out"
IO_EXIT_CODE = 5


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _field_type(f):
    default = f.default if f.default is not MISSING else None
    if isinstance(default, bool):
        return _parse_bool, "BOOL"
    if isinstance(default, int):
        return int, "INT"
    if isinstance(default, float) or default is None:
        return float, "FLOAT"
    return str, "STR"


def _add_section_flags(group, cls, prefix: str, dest_prefix: str):
    for f in fields(cls):
        conv, metavar = _field_type(f)
        group.add_argument(f"--{prefix}{f.name.replace('_', '-')}", dest=f"{dest_prefix}{f.name}",
                           type=conv, metavar=metavar,
                           default=argparse.SUPPRESS, help=f"(default {f.default!r})")


def _add_run_flags(p, with_method: bool = True):
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS), default=argparse.SUPPRESS,
                   help="bilevel hyperparameter preset (default reference)")
    p.add_argument("--output-dir", default=argparse.SUPPRESS,
                   help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    run = p.add_argument_group("run")
    if with_method:
        run.add_argument("--method", choices=METHODS, dest="run_method", default=argparse.SUPPRESS)
    run.add_argument("--expr", dest="run_expr_path", metavar="PATH", default=argparse.SUPPRESS,
                     help="expression CSV (id column, then genes, optional batch)")
    run.add_argument("--features", dest="run_features_path", metavar="PATH", default=argparse.SUPPRESS,
                     help="feature CSV (id column, then features)")
    run.add_argument("--n-pri", dest="run_n_pri", type=int, metavar="INT", default=argparse.SUPPRESS)
    run.add_argument("--raw-counts", dest="run_raw_counts", type=_parse_bool,
                     default=argparse.SUPPRESS, metavar="BOOL")
    run.add_argument("--fold-mode", dest="run_fold_mode", choices=FOLD_MODES, default=argparse.SUPPRESS)
    run.add_argument("--n-folds", dest="run_n_folds", type=int, metavar="INT", default=argparse.SUPPRESS)
    run.add_argument("--split-seed", dest="run_split_seed", type=int, metavar="INT", default=argparse.SUPPRESS)
    run.add_argument("--folds", dest="run_folds", type=_int_list, metavar="LIST", default=argparse.SUPPRESS,
                     help="comma-separated fold indices (default all)")
    run.add_argument("--subset-size", dest="run_subset_size", type=int, metavar="INT", default=argparse.SUPPRESS)
    run.add_argument("--subset-seed", dest="run_subset_seed", type=int, metavar="INT", default=argparse.SUPPRESS)
    _add_section_flags(p.add_argument_group("bilevel"), BilevelConfig, "", "bl_")
    _add_section_flags(p.add_argument_group("synthetic data"), SyntheticSpec, "syn-", "syn_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agl", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", help="write the HVG ranking of the auxiliary genes")
    _add_run_flags(p, with_method=False)
    p.add_argument("--output", help="ranking CSV path (default <output-dir>/ranking.csv)")

    p = sub.add_parser("train", help="cross-validated training of one method")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="fixed-subset sweep, HVG vs random selection")
    _add_run_flags(p, with_method=False)
    p.add_argument("--sizes", type=_int_list, default=list(DEFAULT_SWEEP_SIZES))
    p.add_argument("--selectors", type=_str_list, default=list(SELECTORS))

    p = sub.add_parser("report", help="merge run reports into one comparison table")
    p.add_argument("run_dirs", nargs="+", help="run directories (or report.json files)")
    p.add_argument("--output-dir", default=argparse.SUPPRESS)
    return parser


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return d


def resolve_config(args) -> RunConfig:
    """Preset, then config file, then flags."""
    opts = vars(args)
    file_cfg = _load_config_file(opts["config"]) if opts.get("config") else {}
    file_preset = file_cfg.pop("preset", "reference")
    preset = opts.get("preset", file_preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    bilevel = PRESETS[preset].to_dict()
    synthetic = SyntheticSpec().to_dict()
    for name, section in (("bilevel", bilevel), ("synthetic", synthetic)):
        extra = file_cfg.pop(name, None) or {}
        if not isinstance(extra, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        unknown = set(extra) - set(section)
        if unknown:
            raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
        section.update(extra)
    run = dict(file_cfg)
    for key, value in opts.items():
        if key.startswith("bl_"):
            bilevel[key[3:]] = value
        elif key.startswith("syn_"):
            synthetic[key[4:]] = value
        elif key.startswith("run_"):
            run[key[4:]] = value
    run["bilevel"], run["synthetic"] = bilevel, synthetic
    cfg = RunConfig.from_dict(run)
    cfg.validate()
    return cfg


def output_dir(args) -> Path:
    return Path(getattr(args, "output_dir", None) or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def _echo(line: str):
    print(line, flush=True)


def cmd_rank(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(cfg)
    if ds.n_aux == 0:
        raise DataError("no auxiliary genes to rank")
    scores = hvg_scores(ds.y_aux)
    ranking = rank_genes(scores.score)
    path = Path(args.output) if args.output else output_dir(args) / "ranking.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", "mean", "dispersion", "bin", "score", "rank"])
        for g in ranking.ordered_ids:
            w.writerow([ds.gene_names[ds.auxiliary_indices[g]], repr(float(scores.mean[g])),
                        repr(float(scores.dispersion[g])), int(scores.bin_index[g]),
                        repr(float(scores.score[g])), int(ranking.rank_of[g])])
    _echo(f"ranked {ds.n_aux} auxiliary genes -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    report = train_cv(cfg)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_traces(report, out)
    s = report.summary()
    std = f" ± {s['std']:.4f}" if "std" in s else ""
    _echo(f"{cfg.method}: test PCC {s['mean']:.4f}{std} over {s['n']} folds -> {out / 'report.json'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    result = run_sweep(cfg, sizes=tuple(args.sizes), selectors=tuple(args.selectors))
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for row in result["rows"]:
        _echo(f"size {row['size']:>4} {row['selector']:<6} mean ΔPCC {row['summary']['mean']:+.4f}")
    _echo(f"-> {path}")
    return 0


def cmd_report(args) -> int:
    table = aggregate(load_reports(args.run_dirs))
    csv_path, _ = write_table(table, output_dir(args))
    for row in table["rows"]:
        std = "" if row["std_test_pcc"] is None else f" ± {row['std_test_pcc']:.4f}"
        _echo(f"{row['run']:<20} {row['method']:<10} {row['mean_test_pcc']:.4f}{std}")
    _echo(f"-> {csv_path}")
    return 0


COMMANDS = {"rank": cmd_rank, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except AglError as exc:
        print(f"agl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"agl: I/O error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
