"""Command-line entry point: ``qmckt <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_DIR_ENV = "QMCKT_DATA_DIR"

log = logging.getLogger("qmckt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _data_path(value: str) -> Path:
    """Relative paths that do not exist locally are looked up under $QMCKT_DATA_DIR."""
    p = Path(value)
    root = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# flags that map one-to-one onto TrainConfig fields
_TRAIN_FLAGS = {
    "d": int,
    "experts": int,
    "lambda1": float,
    "lambda2": float,
    "lr": float,
    "epochs": int,
    "patience": int,
    "batch_size": int,
    "epsilon": float,
    "min_band_gap": int,
    "sigma_p": float,
    "sigma_n": float,
    "tau": float,
    "k_max": int,
    "l_max": int,
    "precision": int,
}
_TRAIN_CHOICES = {
    "candidate_activation": ("sigmoid", "tanh"),
    "negative_hinge": ("push-apart", "literal"),
    "loss_reduction": ("sum", "mean"),
    "kc_match": ("exact", "overlap"),
}
_ABLATIONS = ("no_mcka", "no_mqka", "no_moe", "no_cl", "no_irt")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags take precedence")
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    for name, choices in _TRAIN_CHOICES.items():
        p.add_argument(f"--{name.replace('_', '-')}", choices=choices, default=None)
    for name in _ABLATIONS:
        p.add_argument(f"--{name.replace('_', '-')}", action="store_true", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fold", type=int, default=0)


def _train_config(args):
    from .trainer import load_config

    over = {}
    for name in (*_TRAIN_FLAGS, *_TRAIN_CHOICES, *_ABLATIONS, "seed"):
        value = getattr(args, name, None)
        if value is not None:
            over["E" if name == "experts" else name] = value
    try:
        return load_config(args.config, over)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None


def _load_prepared(path):
    from .dataio import load_prepared

    return load_prepared(_data_path(path))


def cmd_prep(args):
    from .dataio import DEFAULT_COLUMNS, prepare, save_prepared

    columns = dict(DEFAULT_COLUMNS)
    for spec in args.column or []:
        key, _, name = spec.partition("=")
        if key not in columns or not name:
            raise UsageError(f"--column expects FIELD=NAME with FIELD in {sorted(columns)}")
        columns[key] = name
    prepared = prepare(_data_path(args.data), max_len=args.max_len, seed=args.seed, columns=columns, delimiter=args.delimiter)
    save_prepared(prepared, args.out)
    print(f"{len(prepared.students)} students, {len(prepared.windows)} windows -> {args.out}")


def cmd_stats(args):
    from .dataio import compute_dataset_stats

    stats = compute_dataset_stats(_load_prepared(args.prepared))
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_pairs(args):
    from .contrastive import DifficultyBanding, build_pairs, compute_question_stats, save_pairs

    prepared = _load_prepared(args.prepared)
    stats = compute_question_stats(prepared.split_windows("train", args.fold), prepared.bank.n)
    banding = DifficultyBanding(min_gap=args.min_band_gap)
    pairs = build_pairs(
        prepared.bank.kc_map,
        stats,
        banding,
        args.epsilon,
        args.k_max,
        args.l_max,
        seed=args.seed,
        kc_match=args.kc_match,
    )
    save_pairs(pairs, args.out)
    print(f"{len(pairs)} anchors -> {args.out}")


def cmd_train(args):
    from .contrastive import load_pairs
    from .evalsuite import evaluate, less_interactive, metrics_from_trace, predict, sliced_eval, write_metrics
    from .plotting import plot_history
    from .trainer import fit

    cfg = _train_config(args)
    prepared = _load_prepared(args.prepared)
    pairs = load_pairs(args.pairs) if args.pairs else None
    result = fit(prepared, cfg, fold=args.fold, out_dir=args.out, pairs=pairs)
    out = Path(args.out)
    reports = {"valid": evaluate(result.model, prepared.split_windows("valid", args.fold))}
    test_w = prepared.split_windows("test")
    trace = predict(result.model, test_w)
    reports["test"] = metrics_from_trace(trace, name="test")
    try:
        reports["test_less_interactive"] = sliced_eval(
            result.model, test_w, less_interactive(result.stats.frequency, cfg.epsilon), trace=trace
        )
    except ValueError as exc:
        log.warning("less-interactive slice skipped: %s", exc)
    write_metrics(reports, out / "metrics.json")
    plot_history(result.history, out / "history.png")
    st = result.state
    print(f"best epoch {st.best_epoch} of {st.epoch}: valid AUC {st.best_auc:.4f}, test AUC {reports['test'].auc:.4f}")


def _parse_grid(args):
    from .trainer import STANDARD_GRID, TrainConfig

    if args.grid is None:
        return dict(STANDARD_GRID)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read grid file: {exc}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise UsageError("grid file must map field names to non-empty lists")
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(grid) - names
    if unknown:
        raise UsageError(f"unknown grid keys {sorted(unknown)}")
    return grid


def cmd_gridsearch(args):
    from .trainer import grid_search

    cfg = _train_config(args)
    grid = _parse_grid(args)
    prepared = _load_prepared(args.prepared)
    best, rows = grid_search(prepared, cfg, grid, fold=args.fold, out_dir=args.out, jobs=args.jobs, sample=args.sample)
    top = max(rows, key=lambda r: r["val_auc"])
    print(f"{len(rows)} cells; best valid AUC {top['val_auc']:.4f} -> {Path(args.out) / 'best_config.json'}")


def _load_model(path):
    from .trainer import load_checkpoint

    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise _DataFailure(str(exc)) from None


class _DataFailure(Exception):
    pass


def cmd_eval(args):
    from .contrastive import compute_question_stats
    from .evalsuite import export_trace, less_interactive, metrics_from_trace, predict, sliced_eval, write_metrics
    from .plotting import plot_prediction_components

    prepared = _load_prepared(args.prepared)
    model = _load_model(args.checkpoint)
    windows = prepared.split_windows(args.split, args.fold)
    trace = predict(model, windows)
    reports = {args.split: metrics_from_trace(trace, name=args.split)}
    stats = compute_question_stats(prepared.split_windows("train", args.fold), prepared.bank.n)
    try:
        reports[f"{args.split}_less_interactive"] = sliced_eval(
            model, windows, less_interactive(stats.frequency, args.epsilon), trace=trace
        )
    except ValueError as exc:
        log.warning("less-interactive slice skipped: %s", exc)
    write_metrics(reports, args.out)
    if args.trace:
        export_trace(trace, args.trace)
        student = args.student or trace.student[0]
        plot_prediction_components(trace, student, Path(args.trace).with_suffix(".png"))
    for name, rep in reports.items():
        print(f"{name}: AUC {rep.auc:.4f} ACC {rep.accuracy:.4f} over {rep.count} steps")


def cmd_export_states(args):
    from .evalsuite import export_states
    from .plotting import plot_knowledge_states

    prepared = _load_prepared(args.prepared)
    model = _load_model(args.checkpoint)
    windows = [w for w in prepared.windows if w.student_id == args.student]
    if not windows:
        raise _DataFailure(f"student {args.student!r} not in the prepared data")
    if not 0 <= args.window < len(windows):
        raise UsageError(f"student {args.student!r} has {len(windows)} window(s)")
    kcs = None
    if args.kcs:
        try:
            kcs = [int(k) for k in args.kcs.split(",")]
        except ValueError:
            raise UsageError("--kcs expects comma-separated integers") from None
    try:
        table = export_states(model, windows[args.window], kcs, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    plot_knowledge_states(table, Path(args.out).with_suffix(".png"), title=args.student)
    print(f"{len(table['step'])} steps -> {args.out}")


def cmd_synth(args):
    from .synth import SynthConfig, config_dict, generate_dataset, oracle_auc, write_dataset

    try:
        cfg = SynthConfig(
            students=args.students,
            questions=args.questions,
            kcs=args.kcs,
            eta=args.eta,
            min_len=args.min_len,
            max_len=args.max_len,
            popularity_exponent=args.exponent,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_dataset(cfg)
    write_dataset(ds, args.out)
    _dump(dict(config_dict(cfg), oracle_auc=oracle_auc(ds)), Path(args.out) / "synth.json")
    print(f"{len(ds.rows)} interactions, oracle AUC {oracle_auc(ds):.4f} -> {args.out}")


def cmd_gradcheck(args):
    from .gradcheck import GradCheckConfig, grad_check

    try:
        cfg = GradCheckConfig(d=args.d, E=args.experts, T=args.steps, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = grad_check(cfg, args.tolerance, corrupt=args.corrupt)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qmckt", description="Knowledge tracing with question and concept acquisition experts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="load an interaction CSV, window it and assign folds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--column", action="append", metavar="FIELD=NAME", help="rename an input column")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("stats", help="dataset summary statistics")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pairs", help="build contrastive pairs from training-fold statistics")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=20.0)
    p.add_argument("--min-band-gap", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--l-max", type=int, default=10)
    p.add_argument("--kc-match", choices=("exact", "overlap"), default="exact")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="train with early stopping; writes a run directory")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", help="pair file from the pairs subcommand (default: built on the fly)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="sweep a grid of configurations")
    p.add_argument("--prepared", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", help="JSON mapping field -> list of values (default: the standard grid)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--sample", type=int, help="evaluate a seeded random subset of this many cells")
    _add_train_flags(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=20.0)
    p.add_argument("--trace", help="also write the per-step prediction decomposition CSV (+ PNG)")
    p.add_argument("--student", help="student shown in the trace figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-states", help="concept mastery per step for one student (CSV + PNG)")
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--kcs", help="comma-separated KC indices (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_states)

    p = sub.add_parser("synth", help="generate a synthetic long-tail data set")
    p.add_argument("--out", required=True)
    p.add_argument("--students", type=int, default=500)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--kcs", type=int, default=10)
    p.add_argument("--eta", type=float, default=0.2)
    p.add_argument("--min-len", type=int, default=20)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--exponent", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients on a micro model")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--experts", type=int, default=2)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", choices=("sigmoid", "tanh", "relu", "softmax"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .dataio import DataError
    from .diffcore import NonFiniteError, ShapeError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"qmckt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, _DataFailure, FileNotFoundError) as exc:
        print(f"qmckt {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, ShapeError, FloatingPointError) as exc:
        print(f"qmckt {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
