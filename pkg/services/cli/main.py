"""
xview command-line interface

    xview gen-data  --seed 7 --count 200 --size 64 --out data/
    xview train     --config configs/desk.cfg --data data/ --out runs/desk
    xview infer     --checkpoint runs/desk/last.pitr --aerial a.ppm --semantic s.ppm --out pred/
    xview gradcheck --seeds 0,1,2
    xview analyze   --config configs/full.cfg --csv report.csv
    xview ablate    --config configs/desk.cfg --data data/ --out runs/ablation
    xview evaluate  --checkpoint runs/desk/last.pitr --data data/

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from services.analyze.gradcheck_suite import gradcheck_suite
from services.analyze.profiler import cross_check, summarize
from services.cli.run_config import RunConfig, config_from_blob, load_run_config
from services.common import metrics
from services.common.config import Settings
from services.common.exceptions import ConfigError, XViewError
from services.common.logging_config import setup_logging
from services.data.dataset import denormalize, load_dataset, normalize, write_dataset
from services.data.ppm import ppm_read, ppm_write
from services.engine.tensor import Tensor, no_grad
from services.model.generator import Generator
from workers.trainer.ablation import run_ablation
from workers.trainer.checkpoint import load_checkpoint
from workers.trainer.evaluate import evaluate
from workers.trainer.trainer import Trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _run_config(args: argparse.Namespace, **extra) -> RunConfig:
    return load_run_config(getattr(args, "config", None), getattr(args, "set", None) or (), extra)


def _require_data(config: RunConfig) -> Path:
    if config.data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir", field="data_dir")
    return Path(config.data_dir)


def _generator_from_checkpoint(path: str) -> Generator:
    ckpt = load_checkpoint(path)
    config = config_from_blob(ckpt.config_text)
    generator = Generator(config.generator_config())
    generator.load_state_dict(ckpt.subset("generator"))
    generator.eval()
    logger.info(f"Loaded generator (variant {config.variant}, step {ckpt.global_step}) from {path}")
    return generator


# ============ Commands ============

def cmd_gen_data(args: argparse.Namespace) -> int:
    splits = write_dataset(args.out, args.seed, args.count, args.size, args.test_fraction)
    print(f"wrote {args.count} triplets to {args.out} "
          f"(train {len(splits['train'])}, test {len(splits['test'])})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args, data_dir=args.data, out_dir=args.out, epochs=args.epochs)
    data_dir = _require_data(config)
    train = load_dataset(data_dir, "train")
    test = load_dataset(data_dir, "test")
    if args.metrics_port:
        metrics.start_metrics_server(args.metrics_port)

    trainer = Trainer(config, train, test, out_dir=config.out_dir)
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.fit()
    print(f"trained {result.global_step} steps over {result.epochs_completed} epochs; outputs in {config.out_dir}")
    if result.final_eval is not None:
        e = result.final_eval
        print(f"held-out L1 direct={e.l1_direct:.6f} final={e.l1_final:.6f} "
              f"PSNR direct={e.psnr_direct:.2f} final={e.psnr_final:.2f}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    generator = _generator_from_checkpoint(args.checkpoint)
    aerial = normalize(ppm_read(args.aerial))[None]
    semantic = normalize(ppm_read(args.semantic))[None]
    with no_grad():
        direct, final = generator(Tensor(aerial), Tensor(semantic))
    out = Path(args.out)
    ppm_write(out / "direct.ppm", denormalize(direct.data[0]))
    ppm_write(out / "final.ppm", denormalize(final.data[0]))
    print(f"wrote {out / 'direct.ppm'} and {out / 'final.ppm'}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    table = gradcheck_suite(args.seeds, eps=args.eps, tolerance=args.tolerance)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3e}"))
    failed = int((~table["passed"]).sum())
    print(f"{len(table) - failed}/{len(table)} probes within tolerance {args.tolerance:g}")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _run_config(args)
    gen_config = config.generator_config()
    summary = summarize(gen_config, config.discriminator_config())
    print(summary.generator.format_table())
    print()
    print(summary.format(include_discriminators=not args.no_discriminators))
    if args.csv:
        summary.generator.to_csv(args.csv)
        print(f"wrote {args.csv}")
    if args.cross_check:
        size = gen_config.image_size
        problems = cross_check(Generator(gen_config), (3, size, size))
        for problem in problems:
            print(f"shape mismatch: {problem}")
        if problems:
            return EXIT_FAILURE
        print("static and executed shapes agree")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _run_config(args, data_dir=args.data, out_dir=args.out)
    data_dir = _require_data(config)
    result = run_ablation(
        config,
        load_dataset(data_dir, "train"),
        load_dataset(data_dir, "test"),
        variants=args.variants,
        seeds=args.seeds,
        epochs=args.epochs,
        out_dir=config.out_dir,
    )
    print(result.format())
    table_path = Path(config.out_dir) / "ablation.csv"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(table_path, index=False, float_format="%.6f", lineterminator="\n")
    print(f"wrote {table_path}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    generator = _generator_from_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, args.split)
    result = evaluate(generator, samples)
    for name, value in result.values().items():
        print(f"{name}={value:.6f}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
}


# ============ Parser ============

def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run config file (key=value lines or flat YAML)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xview", description="Cross-view image translation toolkit")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="log level")
    parser.add_argument("--log-format", choices=["text", "json"], help="log record format")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic paired-view dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = sub.add_parser("train", help="train a generator and two discriminators")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--epochs", type=int, help="overrides epochs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics-port", type=int, default=0, help="serve Prometheus metrics on this port")

    p = sub.add_parser("infer", help="translate one aerial/semantic pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--aerial", required=True)
    p.add_argument("--semantic", required=True)
    p.add_argument("--out", required=True, help="directory for direct.ppm and final.ppm")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and block")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-2)

    p = sub.add_parser("analyze", help="parameter and MAC report for a config")
    _add_config_args(p)
    p.add_argument("--csv", help="write the per-layer generator table here")
    p.add_argument("--no-discriminators", action="store_true", help="report the generator alone")
    p.add_argument("--cross-check", action="store_true", help="compare static shapes with a forward pass")

    p = sub.add_parser("ablate", help="train variants A/E/F under several seeds")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--out", help="ablation root directory (overrides out_dir)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--variants", type=_str_list, default=["A", "E", "F"])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="held-out L1/PSNR of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    overrides = {k: v for k, v in (("log_level", args.log_level), ("log_format", args.log_format)) if v}
    setup_logging(Settings(**overrides))

    try:
        return COMMANDS[args.command](args)
    except XViewError as exc:
        logger.error(f"{args.command} failed: {exc.message}", extra={"error_code": exc.error_code, "details": exc.details})
        print(f"error: {exc.message}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
