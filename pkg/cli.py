"""
Main entry point for sparse FastTucker decomposition.

    python cli.py gen   --order 3 --dim 1000 --nnz 100000 --planted --seed 1 -o t.tns
    python cli.py train -i t.tns --variant plus -J 16 -R 16 -T 50 --workers 8 --seed 1
    python cli.py eval  -i t.tns -m t.ftkp --test-fraction 0.1 --seed 1
    python cli.py bench -i t.tns --variants fasttucker,plus --store-c
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import (
    KERNELS,
    VARIANTS,
    ENV_THREADS,
    ConfigError,
    RunConfig,
    TrainConfig,
    resolve_workers,
)
from decomposition import DivergenceError, create_runner, train
from evaluation import evaluate, measured_costs, predicted_costs
from model import ModelFormatError, default_init_scale, init_model, load_model, model_matches, save_model
from synthgen import DESK_NNZ, FULL_NNZ, PLANTED, UNIFORM, SynthSpec, generate_planted, generate_uniform
from tensor_store import TensorFormatError, infer_order, load_coo, save_coo, split_train_test
from tile_kernels import TILE, ShapeError

logger = logging.getLogger(__name__)

MODEL_SUFFIX = ".ftkp"
TRUTH_SUFFIX = ".truth.ftkp"

# argparse dest -> TrainConfig field, for flags that override a preset
TRAIN_FLAGS = {
    "variant": "variant",
    "rank_j": "rank_j",
    "rank": "rank",
    "lr_a": "lr_a",
    "lr_b": "lr_b",
    "reg_a": "reg_a",
    "reg_b": "reg_b",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "kernel": "kernel",
    "wave_size": "wave_size",
    "init_scale": "init_scale",
    "test_fraction": "test_fraction",
}


def _int_list(text: str) -> List[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got '{text}'")


def _name_list(choices: Sequence[str]):
    def parse(text: str) -> List[str]:
        names = [tok.strip() for tok in text.split(",") if tok.strip()]
        unknown = [n for n in names if n not in choices]
        if unknown or not names:
            raise argparse.ArgumentTypeError(
                f"unknown name(s) {', '.join(unknown) or text!r}; expected {', '.join(choices)}"
            )
        return names

    return parse


# ============================================================================
# PARSER
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("-c", "--config", type=str, help="TrainConfig JSON preset")
    training.add_argument("--order", type=int, help="Tensor order (default: inferred from the file)")
    training.add_argument("-J", dest="rank_j", type=int, help="Uniform factor rank J_n")
    training.add_argument("--ranks", type=_int_list, help="Per-mode ranks J_1,...,J_N")
    training.add_argument("-R", dest="rank", type=int, help="Core rank R")
    training.add_argument("-T", dest="epochs", type=int, help="Epochs")
    training.add_argument("-M", dest="batch_size", type=int, help="Batch size")
    training.add_argument("--lr-a", type=float)
    training.add_argument("--lr-b", type=float)
    training.add_argument("--reg-a", type=float)
    training.add_argument("--reg-b", type=float)
    training.add_argument("--workers", type=int, help="Threads (default: FTK_THREADS or 1)")
    training.add_argument("--seed", type=int)
    training.add_argument("--kernel", choices=KERNELS)
    training.add_argument("--wave-size", type=int, help="Batches evaluated per snapshot")
    training.add_argument("--init-scale", type=float)
    training.add_argument("--test-fraction", type=float)

    parser = argparse.ArgumentParser(
        description="Sparse FastTucker decomposition with SGD (FastTucker, FasterTucker, FastTuckerPlus)."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a synthetic tensor")
    gen.add_argument("-o", "--output", type=str, help="Output .tns path")
    gen.add_argument("--order", type=int, default=3)
    gen.add_argument("--dim", type=int, default=10_000)
    gen.add_argument("--nnz", type=int, help=f"Nonzeros (default {DESK_NNZ}, or {FULL_NNZ} with --full-scale)")
    kind = gen.add_mutually_exclusive_group()
    kind.add_argument("--planted", dest="mode", action="store_const", const=PLANTED)
    kind.add_argument("--uniform", dest="mode", action="store_const", const=UNIFORM)
    gen.add_argument("--ranks", type=_int_list)
    gen.add_argument("-J", dest="rank_j", type=int, default=16)
    gen.add_argument("-R", dest="rank", type=int, default=16)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--min-value", type=float, default=1.0)
    gen.add_argument("--max-value", type=float, default=5.0)
    gen.add_argument("--full-scale", action="store_true")
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", parents=[common, training], help="Train a model")
    tr.add_argument("-i", "--input", type=str)
    tr.add_argument("-o", "--output", type=str, help=f"Model path (default: input with {MODEL_SUFFIX})")
    tr.add_argument("--history", type=str, help="History JSONL path")
    tr.add_argument("--variant", choices=VARIANTS)
    tr.add_argument("--store-c", action="store_true", default=None)
    tr.add_argument("--csv", action="store_true", help="Also write the history as CSV")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a model on a tensor")
    ev.add_argument("-i", "--input", type=str)
    ev.add_argument("-m", "--model", type=str)
    ev.add_argument("--test-fraction", type=float, help="Evaluate on the test part of a train split")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--workers", type=int)

    be = sub.add_parser("bench", parents=[common, training], help="Time and count every variant")
    be.add_argument("-i", "--input", type=str)
    be.add_argument("--variants", type=_name_list(VARIANTS), default=list(VARIANTS))
    be.add_argument("--kernels", type=_name_list(KERNELS))
    be.add_argument("--warmup", type=int, default=1)
    be.add_argument("--store-c", action="store_true", help="Add the plus storage column")
    return parser


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    """Preset (if any) overridden by explicit flags."""
    cfg = TrainConfig.load_from_json(args.config) if getattr(args, "config", None) else TrainConfig()
    for dest, name in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "ranks", None) is not None:
        cfg.ranks = args.ranks
    if args.command == "train" and args.store_c is not None:
        cfg.store_c = args.store_c
    workers = getattr(args, "workers", None)
    if workers is not None or os.environ.get(ENV_THREADS) or not getattr(args, "config", None):
        cfg.workers = resolve_workers(workers)
    return cfg


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    run = RunConfig(
        command=args.command,
        input=getattr(args, "input", None),
        output=getattr(args, "output", None),
        model_path=getattr(args, "model", None),
        history_path=getattr(args, "history", None),
        csv=bool(getattr(args, "csv", False)),
        full_scale=bool(getattr(args, "full_scale", False)),
    )
    if args.command in ("train", "bench"):
        run.train = train_config_from_args(args)
        if args.command == "bench" and args.epochs is None and not args.config:
            run.train.epochs = 1
    elif args.command == "eval":
        run.train.workers = resolve_workers(args.workers)
        if args.test_fraction is not None:
            run.train.test_fraction = args.test_fraction
    run.validate()
    return run


def _warn_untiled(ranks: Sequence[int], rank: int):
    if any(j % TILE for j in ranks) or rank % TILE:
        logger.warning("rank not a multiple of 16; tiles padded")


def _load_tensor(path: str, order: Optional[int]):
    return load_coo(path, order if order is not None else infer_order(path))


def _init_for(cfg: TrainConfig, tensor):
    ranks = cfg.resolve_ranks(tensor.order)
    _warn_untiled(ranks, cfg.rank)
    scale = cfg.init_scale or default_init_scale(tensor.values, ranks, cfg.rank)
    return ranks, scale


# ============================================================================
# SUBCOMMANDS
# ============================================================================


def cmd_gen(args: argparse.Namespace, run: RunConfig) -> int:
    nnz = args.nnz or (FULL_NNZ if run.full_scale else DESK_NNZ)
    spec = SynthSpec(
        order=args.order,
        dim=args.dim,
        nnz=nnz,
        mode=args.mode or UNIFORM,
        ranks=args.ranks,
        rank_j=args.rank_j,
        rank=args.rank,
        noise=args.noise,
        min_value=args.min_value,
        max_value=args.max_value,
        seed=args.seed,
    )
    summary = {"output": run.output, "order": spec.order, "dim": spec.dim, "nnz": spec.nnz, "mode": spec.mode}
    if spec.mode == PLANTED:
        tensor, truth = generate_planted(spec)
        truth_path = str(Path(run.output).with_suffix(TRUTH_SUFFIX))
        save_model(truth, truth_path)
        summary["truth"] = truth_path
    else:
        tensor = generate_uniform(spec)
    save_coo(tensor, run.output)
    print(json.dumps(summary))
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    cfg = run.train
    tensor = _load_tensor(run.input, args.order)
    train_set, test_set = split_train_test(tensor, cfg.test_fraction, cfg.seed)
    ranks, scale = _init_for(cfg, train_set)
    model = init_model(tensor.dims, ranks, cfg.rank, cfg.seed, scale)

    history = train(
        train_set,
        test_set,
        model,
        cfg.hyperparams(),
        variant=cfg.variant,
        store_c=cfg.store_c,
        workers=cfg.workers,
        seed=cfg.seed,
        kernels=cfg.kernel,
        wave_size=cfg.wave_size,
    )

    model_path = run.output or str(Path(run.input).with_suffix(MODEL_SUFFIX))
    history_path = run.history_path or str(Path(model_path).with_suffix(".history.jsonl"))
    save_model(model, model_path)
    history.write_jsonl(history_path)
    if run.csv:
        history.write_csv(str(Path(history_path).with_suffix(".csv")))

    last = history.last
    print(
        json.dumps(
            {
                "variant": cfg.variant,
                "epochs": len(history),
                "train_loss": last.train_loss if last else None,
                "test_rmse": last.test_rmse if last else None,
                "test_mae": last.test_mae if last else None,
                "model": model_path,
                "history": history_path,
            }
        )
    )
    return 0


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    model = load_model(run.model_path)
    tensor = load_coo(run.input, model.order)
    if not model_matches(model, tensor.dims):
        raise ValueError(f"model dims {model.dims} do not cover tensor dims {tensor.dims}")
    if args.test_fraction is not None:
        _, tensor = split_train_test(tensor, run.train.test_fraction, args.seed)
    metrics = evaluate(model, tensor, run.train.workers)
    print(json.dumps(metrics.to_dict()))
    return 0


def _bench_row(cfg: TrainConfig, tensor, variant: str, kernel: str, store_c: bool, warmup: int) -> Dict:
    ranks, scale = _init_for(cfg, tensor)
    model = init_model(tensor.dims, ranks, cfg.rank, cfg.seed, scale)
    hyper = cfg.hyperparams()
    runner = create_runner(
        variant, tensor, model, hyper, cfg.workers, cfg.seed, kernel, cfg.wave_size, store_c=store_c
    )
    for epoch in range(1, warmup + 1):
        runner.run_epoch(epoch)
    measured = [runner.run_epoch(warmup + t) for t in range(1, cfg.epochs + 1)]
    last = measured[-1]
    return {
        "variant": variant,
        "kernel": kernel,
        "storage": "storage" if store_c else "calculation",
        "epoch_seconds": float(np.mean([s.seconds for s in measured])),
        "factor_seconds": float(np.mean([s.factor_seconds for s in measured])),
        "core_seconds": float(np.mean([s.core_seconds for s in measured])),
        "measured": measured_costs(last, "factor").to_dict(),
        "measured_core": measured_costs(last, "core").to_dict(),
        "predicted": predicted_costs(tensor.order, hyper.batch_size, cfg.rank, ranks, variant).to_dict(),
    }


def cmd_bench(args: argparse.Namespace, run: RunConfig) -> int:
    cfg = run.train
    if cfg.epochs < 1 or args.warmup < 0:
        raise ConfigError("bench needs at least one measured epoch and a non-negative warmup")
    tensor = _load_tensor(run.input, args.order)
    kernels = args.kernels or [cfg.kernel]

    rows = []
    for kernel in kernels:
        for variant in args.variants:
            rows.append(_bench_row(cfg, tensor, variant, kernel, False, args.warmup))
            if variant == "plus" and args.store_c:
                rows.append(_bench_row(cfg, tensor, variant, kernel, True, args.warmup))

    for row in rows:
        base = next(
            (r for r in rows if r["variant"] == "fasttucker" and r["kernel"] == row["kernel"]), None
        )
        if base is not None:
            row["speedup_vs_fasttucker"] = {
                phase: base[f"{phase}_seconds"] / row[f"{phase}_seconds"] if row[f"{phase}_seconds"] else None
                for phase in ("factor", "core", "epoch")
            }
    if "tiled" in kernels and "flat" in kernels:
        for row in rows:
            if row["kernel"] != "tiled":
                continue
            flat = next(
                r for r in rows
                if r["kernel"] == "flat" and r["variant"] == row["variant"] and r["storage"] == row["storage"]
            )
            row["tile_speedup"] = {
                phase: flat[f"{phase}_seconds"] / row[f"{phase}_seconds"] if row[f"{phase}_seconds"] else None
                for phase in ("factor", "core")
            }

    print(json.dumps({"input": run.input, "order": tensor.order, "nnz": tensor.nnz, "rows": rows}, indent=2))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        run = run_config_from_args(args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    try:
        return COMMANDS[args.command](args, run)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (OSError, TensorFormatError, ModelFormatError, ShapeError, DivergenceError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
