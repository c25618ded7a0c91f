"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .errors import ConfigError, DataError, NumericalError, PreconditionError, VampireError
from .imageprep import preprocess_layers
from .metrics import oracle_trials, confusion_metrics, EvalRecord, threshold_metrics, write_summary, summarize_folds
from .network import ModelConfig, model_gradient_check, tiny_config
from .synthdata import read_pgm, write_dataset, write_pgm
from .vesseltrace import refine_mask, scan_order_for, segment_vessels, write_order_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vampire", description="Vessel-aware selective-scan pipeline on synthetic OCTA-like data.",
                formatter_class=_fmt())
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, formatter_class=_fmt())

    def run_flags(sp, config_required):
        # checked after parsing so that unknown flags are reported first
        sp.add_argument("--config", default=None, help="RunConfig JSON file" + (" (required)" if config_required else ""))
        sp.set_defaults(config_required=config_required)
        sp.add_argument("--seed", type=int, default=None, help="override the config seed (data and training)")
        sp.add_argument("--out", default=None, help="override the output directory")

    g = add("gen-data", "generate a synthetic dataset (PGM images plus manifest.csv)")
    run_flags(g, False)

    pp = add("prep-preview", "write the preprocessed version of a PGM image")
    pp.add_argument("--image", required=True, help="input PGM")
    pp.add_argument("--out", required=True, help="output PGM")
    pp.add_argument("--config", default=None, help="RunConfig JSON supplying preprocessing settings")

    eo = add("export-order", "write the scan order CSV for a mask or image")
    eo.add_argument("--image", required=True, help="PGM mask (values 0/1) or intensity image to segment")
    eo.add_argument("--strategy", choices=pipeline.STRATEGIES, default="vessel", help="scan strategy")
    eo.add_argument("--patch-size", type=int, default=8, help="patch side in pixels")
    eo.add_argument("--vessel-fraction-min", type=float, default=0.1, help="skeleton share for a vessel patch")
    eo.add_argument("--out", required=True, help="output CSV")

    tr = add("train", "train one or all folds")
    run_flags(tr, True)
    tr.add_argument("--data", default=None, help="dataset directory; generated from the config when omitted")
    tr.add_argument("--fold", type=int, action="append", default=None, help="fold to train, repeatable; all folds when omitted")
    tr.add_argument("--workers", type=int, default=pipeline.default_workers(), help="parallel folds")

    ev = add("evaluate", "evaluate trained folds and write metric CSVs")
    run_flags(ev, True)
    ev.add_argument("--data", default=None, help="dataset directory; generated from the config when omitted")
    ev.add_argument("--fold", type=int, action="append", default=None, help="fold to evaluate, repeatable; all folds when omitted")
    ev.add_argument("--checkpoint", default=None, help="checkpoint path (single fold only)")
    ev.add_argument("--untrained", action="store_true", help="evaluate the initialisation instead of a checkpoint")

    ab = add("ablate", "run module and scan-strategy ablations")
    run_flags(ab, True)
    ab.add_argument("--data", default=None, help="dataset directory; generated from the config when omitted")
    ab.add_argument("--workers", type=int, default=pipeline.default_workers(), help="parallel jobs")

    gc = add("gradcheck", "finite-difference check of the full model's gradients")
    gc.add_argument("--tiny", action="store_true", help="use the tiny model and probe every coordinate")
    gc.add_argument("--config", default=None, help="RunConfig JSON whose model is checked (ignored with --tiny)")
    gc.add_argument("--per-tensor", type=int, default=8, help="coordinates probed per tensor (non-tiny runs)")
    gc.add_argument("--seed", type=int, default=0, help="seed for inputs and parameter jitter")
    gc.add_argument("--tolerance", type=float, default=1e-4, help="fail above this relative error")

    mo = add("metrics-oracle", "compare ranking and threshold metrics with brute-force references")
    mo.add_argument("--trials", type=int, default=1000, help="random trials")
    mo.add_argument("--max-len", type=int, default=8, help="largest set size")
    mo.add_argument("--seed", type=int, default=0, help="trial seed")
    return p


def _config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, gen=replace(cfg.gen, seed=args.seed))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        cfg = replace(cfg, workers=args.workers)
    return cfg.validate()


def _folds(args, k: int) -> list[int]:
    folds = list(range(k)) if not args.fold else args.fold
    bad = [f for f in folds if not 0 <= f < k]
    if bad:
        raise ConfigError(f"fold(s) {bad} outside 0..{k - 1}")
    return folds


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    from .synthdata import generate_dataset
    out = Path(cfg.out_dir if args.out is None else args.out)
    manifest = write_dataset(generate_dataset(cfg.gen), out)
    print(manifest)
    return EXIT_OK


def cmd_prep_preview(args) -> int:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
    grid, _ = read_pgm(args.image)
    out = preprocess_layers(grid[None], cfg.prep)[0]
    print(write_pgm(args.out, out))
    return EXIT_OK


def _mask_from(grid: np.ndarray) -> np.ndarray:
    values = np.unique(grid)
    if np.isin(values, (0.0, 1.0)).all():
        return grid.astype(np.uint8)
    return refine_mask(segment_vessels(np.stack([grid] * 3)))


def cmd_export_order(args) -> int:
    grid, _ = read_pgm(args.image)
    h, w = grid.shape
    if h != w or h % args.patch_size:
        raise DataError(f"image {h}x{w} is not a square multiple of patch size {args.patch_size}")
    order = scan_order_for(args.strategy, h // args.patch_size, _mask_from(grid), args.vessel_fraction_min)
    print(write_order_csv(order, args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    samples, plan = pipeline.setup_run(cfg, args.data)
    folds = _folds(args, plan.k)
    jobs = [(cfg, f, samples, plan) for f in folds]
    for f, res in zip(folds, pipeline._map(_train_job, jobs, cfg.workers)):
        print(f"fold {f}: final loss {res.losses[-1] if res.losses else float('nan'):.6f} -> {res.checkpoint}")
    return EXIT_OK


def _train_job(job):
    cfg, f, samples, plan = job
    return pipeline.train(cfg, f, samples, plan)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    samples, plan = pipeline.setup_run(cfg, args.data)
    folds = _folds(args, plan.k)
    if args.checkpoint and len(folds) != 1:
        raise ConfigError("--checkpoint needs exactly one --fold")
    tables = []
    for f in folds:
        ckpt = None if args.untrained else (args.checkpoint or pipeline.fold_dir(cfg, f) / "model.ckpt")
        table = pipeline.evaluate(ckpt, f, cfg, samples, plan)
        tables.append(table)
        m = table["macro"]
        print(f"fold {f}: macro f1 {m['f1']:.4f} auc {m['auc']:.4f} aupr {m['aupr']:.4f}")
    summary = summarize_folds(tables)
    path = write_summary(summary, Path(cfg.out_dir) / cfg.tag / "summary.csv")
    print(f"mean macro auc {summary['macro']['auc']:.4f} -> {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = pipeline.ablate(cfg, args.data)
    means: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        means.setdefault((r["group"], r["variant"]), []).append(r["auc"])
    for (group, variant), aucs in means.items():
        print(f"{group:8s} {variant:9s} macro auc {np.nanmean(aucs):.4f}")
    print(Path(cfg.out_dir) / "ablation.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.tiny:
        worst, n = model_gradient_check(tiny_config(), seed=args.seed)
    else:
        model = pipeline.load_config(args.config).model if args.config else ModelConfig()
        worst, n = model_gradient_check(model, seed=args.seed, per_tensor=args.per_tensor)
    print(f"max relative error {worst:.3e} over {n} coordinates")
    if not worst < args.tolerance:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tolerance:.1e}")
    return EXIT_OK


def cmd_metrics_oracle(args) -> int:
    res = oracle_trials(args.trials, args.max_len, args.seed)
    rng = np.random.default_rng([args.seed, 1])
    confusion_err = 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        recs = [EvalRecord(f"e{i}", f"p{i}", rng.uniform(size=5), rng.integers(0, 2, 5)) for i in range(n)]
        table = confusion_metrics(recs)
        S = np.stack([r.scores for r in recs])
        Y = np.stack([r.labels for r in recs])
        for j, name in enumerate(k for k in table if k != "macro"):
            if table[name] != threshold_metrics(S[:, j], Y[:, j]):
                confusion_err += 1
    print(f"auc max error {res['auc_max_error']:.3e} over {res['auc_cases']} cases")
    print(f"aupr max error {res['aupr_max_error']:.3e} over {res['aupr_cases']} cases")
    print(f"confusion mismatches {confusion_err}")
    if res["auc_max_error"] or res["aupr_max_error"] or confusion_err:
        raise NumericalError("metric implementations disagree with the references")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prep-preview": cmd_prep_preview,
    "export-order": cmd_export_order,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "metrics-oracle": cmd_metrics_oracle,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config_required", False) and not args.config:
            raise UsageError(f"vampire {args.command}: --config is required")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, PreconditionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VampireError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
