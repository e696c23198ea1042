"""
Command-line entry point: python -m app.cli <command> [options]

Commands: generate, train, eval, sweep, accept, gradcheck, bench, export-features, serve.
Exit codes: 0 success, 1 check failure, 2 config or usage error, 3 runtime numerical error.
"""

import argparse
import asyncio
import inspect
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app.config import AcceptanceConfig, BenchConfig, Config, ServerConfig
from app.core.dataset import Dataset, load_dataset, save_dataset
from app.core.synthetic import generate
from app.errors import ConfigError, SopLabError
from app.jobs.acceptance_job import AcceptanceJob
from app.jobs.bench_job import BenchJob
from app.jobs.gradcheck_job import GradCheckJob
from app.jobs.sweep_job import SweepJob
from app.jobs.train_job import FeatureExportJob, SSLTrainJob, evaluate_checkpoint
from app.models import RunConfig, Split, SweepKind, TrainMode
from app.utils import dump_model, load_run_config, save_to_json

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the JSON run document and apply command-line overrides of top-level scalars."""
    config = load_run_config(getattr(args, "config", None))
    document = dump_model(config)
    if getattr(args, "seed", None) is not None:
        document["seed"] = args.seed
    for flag, key in (("mode", "mode"), ("lambda_", "lambda"), ("iterations", "iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            document["train"][key] = value
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid command-line override:\n{e}") from e


def _output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Config.RUNS_DIR / args.command


def _dataset(args: argparse.Namespace, config: RunConfig) -> Dataset:
    if getattr(args, "data", None):
        return load_dataset(Path(args.data))
    logger.info("No --data given, generating the dataset from the run config")
    return generate(config.data)


def _print(payload) -> None:
    print(json.dumps(payload, indent=2))


async def cmd_generate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _output_dir(args, config)
    dataset = generate(config.data)
    await save_dataset(dataset, out, storage="float32" if args.float32 else "float64")
    await save_to_json(dump_model(config), out / Config.RESOLVED_CONFIG_FILENAME, indent=2)
    _print({"out": str(out), **dataset.counts(), "num_classes": dataset.num_classes})
    return EXIT_OK


async def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    result = await SSLTrainJob(config, _dataset(args, config), _output_dir(args, config)).run()
    _print(result.summary())
    return EXIT_OK


async def cmd_eval(args: argparse.Namespace) -> int:
    result = evaluate_checkpoint(Path(args.checkpoint), load_dataset(Path(args.data)), Split(args.split))
    _print(result)
    return EXIT_OK


async def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    job = SweepJob(config, _dataset(args, config), SweepKind(args.kind), _output_dir(args, config))
    rows = await job.run()
    _print({"kind": args.kind, "rows": len(rows), "out": str(job.output_dir)})
    return EXIT_OK


async def cmd_accept(args: argparse.Namespace) -> int:
    if args.config is None:
        args.config = AcceptanceConfig.RUN_DOCUMENT
    config = resolve_config(args)
    report = await AcceptanceJob(config, _dataset(args, config), _output_dir(args, config)).run()
    _print(report.model_dump(mode="json"))
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


async def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    report = await GradCheckJob(config.model, config.sop).run(Path(args.out) if args.out else None)
    _print(report.model_dump(mode="json"))
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


async def cmd_bench(args: argparse.Namespace) -> int:
    rows = await BenchJob(args.dims, args.iterations, args.repeats, args.seed).run(
        Path(args.out) if args.out else None
    )
    _print(rows)
    return EXIT_OK


async def cmd_export_features(args: argparse.Namespace) -> int:
    dataset = load_dataset(Path(args.data))
    output = await FeatureExportJob(Path(args.checkpoint), dataset, Path(args.out), Split(args.split)).run()
    _print({"out": str(output), "rows": len(dataset.split(Split(args.split)))})
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    # imported here so the numerical commands do not pay for uvicorn
    from app.server import serve

    serve(Path(args.runs_dir) if args.runs_dir else None, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soplab", description="Adversarial second-order semi-supervised lab")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", type=Path, help="JSON run document (defaults apply when omitted)")
        sub.add_argument("--seed", type=int, help="override the top-level seed")
        return sub

    generate_parser = with_config(commands.add_parser("generate", help="generate and save a synthetic dataset"))
    generate_parser.add_argument("--out", help="dataset directory")
    generate_parser.add_argument("--float32", action="store_true", help="store images as 32-bit floats")
    generate_parser.set_defaults(handler=cmd_generate)

    train_parser = with_config(commands.add_parser("train", help="train one run"))
    train_parser.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    train_parser.add_argument("--out", help="run directory")
    train_parser.add_argument("--mode", choices=[mode.value for mode in TrainMode])
    train_parser.add_argument("--lambda", dest="lambda_", type=float)
    train_parser.add_argument("--iterations", type=int)
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser("eval", help="accuracy of a checkpoint on a split")
    eval_parser.add_argument("--checkpoint", required=True, help="checkpoint path without extension")
    eval_parser.add_argument("--data", required=True)
    eval_parser.add_argument("--split", default=Split.TEST.value, choices=[Split.VALIDATION.value, Split.TEST.value, Split.LABELED.value])
    eval_parser.set_defaults(handler=cmd_eval)

    sweep_parser = with_config(commands.add_parser("sweep", help="run a grid of trainings"))
    sweep_parser.add_argument("--kind", required=True, choices=[kind.value for kind in SweepKind])
    sweep_parser.add_argument("--data")
    sweep_parser.add_argument("--out")
    sweep_parser.add_argument("--mode", choices=[mode.value for mode in TrainMode])
    sweep_parser.add_argument("--iterations", type=int)
    sweep_parser.set_defaults(handler=cmd_sweep)

    accept_parser = with_config(
        commands.add_parser("accept", help="modes sweep over several seeds checked against the acceptance thresholds")
    )
    accept_parser.add_argument("--data")
    accept_parser.add_argument("--out")
    accept_parser.add_argument("--iterations", type=int)
    accept_parser.set_defaults(handler=cmd_accept)

    gradcheck_parser = with_config(commands.add_parser("gradcheck", help="finite-difference gradient gate"))
    gradcheck_parser.add_argument("--out", help="write the JSON report here")
    gradcheck_parser.set_defaults(handler=cmd_gradcheck)

    bench_parser = commands.add_parser("bench", help="Newton-Schulz vs exact square root timing")
    bench_parser.add_argument("--dims", type=_int_list, default=list(BenchConfig.DIMENSIONS))
    bench_parser.add_argument("--iterations", type=_int_list, default=list(BenchConfig.ITERATIONS))
    bench_parser.add_argument("--repeats", type=int, default=BenchConfig.REPEATS)
    bench_parser.add_argument("--seed", type=int, default=BenchConfig.SEED)
    bench_parser.add_argument("--out", help="write bench.csv here")
    bench_parser.set_defaults(handler=cmd_bench)

    export_parser = commands.add_parser("export-features", help="write pooled features of a split as CSV")
    export_parser.add_argument("--checkpoint", required=True)
    export_parser.add_argument("--data", required=True)
    export_parser.add_argument("--out", required=True)
    export_parser.add_argument("--split", default=Split.TEST.value, choices=[split.value for split in Split])
    export_parser.set_defaults(handler=cmd_export_features)

    serve_parser = commands.add_parser("serve", help="serve run artifacts over HTTP")
    serve_parser.add_argument("--runs-dir")
    serve_parser.add_argument("--host", default=ServerConfig.HOST)
    serve_parser.add_argument("--port", type=int, default=ServerConfig.PORT)
    serve_parser.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK

    try:
        if inspect.iscoroutinefunction(args.handler):
            return asyncio.run(args.handler(args))
        return args.handler(args)
    except SopLabError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.command} failed, invalid configuration:\n{e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"{args.command} failed, I/O error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
