"""
Command-line entry points: python -m app.cli <command>

Exit codes: 0 success, 2 invalid configuration, 3 non-finite numerics,
4 malformed files or contract violations, 1 anything else.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from app.exceptions import ConfigError, ContractError, DimensionError, FormatError, NumericError
from app.models import BenchOperator, ModelConfig, TrainRecipe
from app.services.ablation import VARIANTS, run_ablation
from app.services.bench import DEFAULT_LENGTHS, run_benchmark, summarize
from app.services.checkpoint import load_checkpoint
from app.services.gradcheck_suites import SCOPES, all_passed, render_reports, report_rows, run_suites
from app.services.network import ARWKV, load_pretrained, param_count
from app.services.reporting import (
    ABLATION_SCHEMA,
    BENCH_SCHEMA,
    GRADCHECK_SCHEMA,
    METRICS_SCHEMA,
    emit_csv,
    rows_from_models,
)
from app.services.spectrograms import SpectrogramDataset, export_dataset, gen_synthetic, open_datasets, parse_synthetic_arg
from app.services.training import evaluate, train_loop
from app.utils.config_io import load_config, save_config
from app.utils.helpers import format_score, setup_logging
from app.utils.rng import RngStreams

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FORMAT = 4

CONFIG_SNAPSHOT = "config.txt"
RECIPE_SNAPSHOT = "recipe.txt"


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _operators(text: str) -> List[BenchOperator]:
    try:
        return [BenchOperator(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"unknown operator in '{text}': {e}", ["operators"]) from e


def _load_recipe(args: argparse.Namespace) -> TrainRecipe:
    recipe = load_config(args.recipe, TrainRecipe)
    if args.seed is not None:
        recipe = recipe.with_overrides(seed=args.seed)
    return recipe


def _check_compatible(cfg: ModelConfig, dataset: SpectrogramDataset) -> None:
    if cfg.num_classes != dataset.num_classes:
        raise ConfigError(
            f"num_classes={cfg.num_classes} but the data has {dataset.num_classes} classes", ["num_classes"]
        )
    if tuple(cfg.input_size) != dataset.input_size and not cfg.interpolate_pos:
        raise ConfigError(
            f"input_size={cfg.input_size} but the data is {dataset.input_size}", ["input_size"]
        )


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, ModelConfig)
    recipe = _load_recipe(args)
    if args.head_dim is not None:
        cfg = cfg.with_overrides(head_dim=args.head_dim)
    if recipe.drop_path_rate is not None:
        cfg = cfg.with_overrides(drop_path_rate=recipe.drop_path_rate)
    train, val = open_datasets(args.data, args.val_data, cfg.num_classes)
    _check_compatible(cfg, train)

    out = Path(args.out)
    save_config(cfg, out / CONFIG_SNAPSHOT)
    save_config(recipe, out / RECIPE_SNAPSHOT)

    model = ARWKV(cfg, generator=RngStreams(recipe.seed).torch("init"))
    if args.init_checkpoint:
        _, state = load_checkpoint(args.init_checkpoint)
        report = load_pretrained(model, state)
        logger.info("📥 Initialised %d tensors from %s (%d skipped)",
                    len(report["loaded"]), args.init_checkpoint, len(report["skipped"]))
    logger.info("🧠 %d parameters, %d tokens per input", param_count(cfg), cfg.seq_len)

    history = train_loop(model, train, recipe, val_dataset=val, out_dir=out, record_timing=not args.no_timing)
    if history.best_accuracy is not None:
        logger.info("🏆 Best val accuracy %s at step %d", format_score(history.best_accuracy), history.best_step)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for evaluate", ["checkpoint"])
    cfg, state = load_checkpoint(args.checkpoint)
    model = ARWKV(cfg)
    model.load_state_dict(state)
    train, val = open_datasets(args.data, args.val_data, cfg.num_classes)
    dataset = val if val is not None else train
    _check_compatible(cfg, dataset)
    result = evaluate(model.eval(), dataset, dtype=next(model.parameters()).dtype)
    logger.info("✅ accuracy %s, mAP %.4f, loss %.4f over %d samples",
                format_score(result.accuracy), result.mean_ap, result.loss, result.count)
    if args.out:
        row = {"kind": "eval", "step": 0, "loss": result.loss, "split": "eval",
               "accuracy": result.accuracy, "mAP": result.mean_ap}
        emit_csv([row], METRICS_SCHEMA, Path(args.out) / "eval.csv")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    points = run_benchmark(
        lengths=args.lengths or DEFAULT_LENGTHS,
        channels=args.channels,
        batch=args.batch,
        reps=args.reps,
        operators=args.operators or tuple(BenchOperator),
        head_dim=args.head_dim or 64,
        mem_budget_bytes=args.mem_budget_bytes,
        seed=args.seed or 0,
        record_timing=not args.no_timing,
    )
    emit_csv(rows_from_models(points, BENCH_SCHEMA), BENCH_SCHEMA, Path(args.out) / "bench.csv")
    if not args.no_timing:
        for operator, slope in sorted(summarize(points).items()):
            logger.info("📐 %s log-log slope %.2f", operator, slope)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args.config, ModelConfig)
    recipe = _load_recipe(args)
    train, val = open_datasets(args.data, args.val_data, base.num_classes)
    if val is None:
        raise ConfigError("ablation needs validation data (synthetic n_val > 0 or --val-data)", ["val-data"])
    _check_compatible(base, train)
    variants = args.variant.split(",") if args.variant else None
    rows = run_ablation(base, recipe, train, val, variants=variants, steps=args.steps)
    emit_csv(rows, ABLATION_SCHEMA, Path(args.out) / "ablation.csv")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suites(args.scope, seed=args.seed or 0)
    render_reports(results)
    if args.out:
        emit_csv(report_rows(results), GRADCHECK_SCHEMA, Path(args.out) / "gradcheck.csv")
    for reports in results.values():
        for r in reports:
            if not r.passed:
                logger.error("❌ %s: max rel err %.3e > %.0e (input %s, coordinate %s) %s",
                             r.name, r.max_rel_err, r.tol, r.worst_input, r.worst_index, r.message)
    return EXIT_OK if all_passed(results) else EXIT_OTHER


def cmd_make_data(args: argparse.Namespace) -> int:
    task = parse_synthetic_arg(args.data)
    if args.seed is not None:
        task = task.with_overrides(seed=args.seed)
    export_dataset(gen_synthetic(task, task.n_train, "train"), args.out, "train")
    if task.n_val:
        export_dataset(gen_synthetic(task, task.n_val, "val"), args.out, "val")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from app.main import serve

    if args.checkpoint:
        os.environ["ARWKV_CHECKPOINT"] = args.checkpoint
    serve()
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "make-data": cmd_make_data,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app.cli", description="A-RWKV spectrogram classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--log-level", default=None)
        return p

    p = add("train", "train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--recipe", required=True)
    p.add_argument("--data", required=True, help="manifest path or synthetic:key=value,...")
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--init-checkpoint")
    p.add_argument("--head-dim", type=int)
    p.add_argument("--no-timing", action="store_true")

    p = add("evaluate", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out")

    p = add("bench", "WKV vs attention scaling benchmark")
    p.add_argument("--lengths", type=_int_list)
    p.add_argument("--channels", type=int, default=192)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--operators", type=_operators)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--mem-budget-bytes", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-timing", action="store_true")

    p = add("ablate", f"train the {''.join(VARIANTS)} variant ladder")
    p.add_argument("--config", required=True)
    p.add_argument("--recipe", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--variant", help="comma-separated subset, e.g. A,C")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = add("gradcheck", "finite-difference gradient suites")
    p.add_argument("--scope", choices=list(SCOPES) + ["all"], default="all")
    p.add_argument("--out")

    p = add("make-data", "export a synthetic task as MELF files and manifests")
    p.add_argument("--data", required=True, help="synthetic:key=value,...")
    p.add_argument("--out", required=True)

    p = add("serve", "run the HTTP inference service")
    p.add_argument("--checkpoint")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError) as e:
        logger.error("❌ Invalid configuration: %s", e)
        return EXIT_CONFIG
    except NumericError as e:
        logger.error("❌ Numeric failure: %s", e)
        return EXIT_NUMERIC
    except (FormatError, ContractError, DimensionError) as e:
        logger.error("❌ %s: %s", type(e).__name__, e)
        return EXIT_FORMAT
    except Exception as e:
        logger.exception("❌ %s failed: %s", args.command, e)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
