"""Command-line entry point.

    python main.py gen-data [--config FILE] [--out DIR] [--force]
    python main.py pretrain|train|adapt|eval|run --config FILE [--out DIR] [--seed S ...] [--resume | --force]
    python main.py report RUN_DIR ... [--out DIR]

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import DatasetConfig, ExperimentConfig, settings
from exceptions import ConfigError, MissingArtifactsError, PTSegError
from log import logger, setup_logging

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SUBCOMMAND_MODES = {
    "pretrain": {"pretrain"},
    "train": {"train_baseline", "train_dg", "oracle_train"},
    "adapt": {"adapt_ttda"},
    "eval": {"eval"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptseg", description="Prompt-conditioned diffusion segmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the synthetic multi-domain benchmark")
    gen.add_argument("--config", type=Path, help="experiment config whose dataset block is used")
    gen.add_argument("--out", type=Path, help="dataset root (defaults to the config's or PTSEG_DATA_ROOT)")
    gen.add_argument("--force", action="store_true", help="regenerate into a non-empty directory")

    for name in ("pretrain", "train", "adapt", "eval", "run"):
        cmd = sub.add_parser(name, help=f"{name} according to a config file" if name != "run" else "run any config")
        cmd.add_argument("--config", type=Path, required=True)
        cmd.add_argument("--out", type=Path, help="override output_dir")
        cmd.add_argument("--seed", type=int, action="append", help="run only these seeds (repeatable)")
        group = cmd.add_mutually_exclusive_group()
        group.add_argument("--resume", action="store_true", help="continue an interrupted run with the same config")
        group.add_argument("--force", action="store_true", help="overwrite existing run directories")

    rep = sub.add_parser("report", help="merge completed runs into the ablation summary")
    rep.add_argument("runs", type=Path, nargs="+", help="run directories or roots containing them")
    rep.add_argument("--out", type=Path, default=None, help="output directory (default: <RUNS_ROOT>/report)")
    return parser


def load_config(path: Path) -> ExperimentConfig:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return ExperimentConfig.from_file(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _gen_data(args) -> int:
    from synthetic import gen_dataset

    dataset = load_config(args.config).dataset if args.config else DatasetConfig(root=settings.DATA_ROOT)
    root = args.out or dataset.root
    gen_dataset(dataset.spec, root, force=args.force)
    print(f"[OK] dataset written to {root}")
    return EXIT_OK


def _experiment(args) -> int:
    from experiment import ExperimentRunner

    config = load_config(args.config)
    allowed = SUBCOMMAND_MODES.get(args.command)
    if allowed is not None and config.mode not in allowed:
        raise ConfigError(f"'{args.command}' cannot run a config with mode '{config.mode}'")
    runner = ExperimentRunner(config, out=args.out, seeds=args.seed, resume=args.resume, force=args.force)
    for run_dir in runner.run():
        print(f"[OK] {run_dir}")
    return EXIT_OK


def _report(args) -> int:
    from report import report

    csv_path, md_path = report(args.runs, args.out or settings.RUNS_ROOT / "report")
    print(md_path.read_text(encoding="utf-8"))
    print(f"[OK] {csv_path}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(settings.LOG_LEVEL)
    handlers = {"gen-data": _gen_data, "report": _report}
    try:
        return handlers.get(args.command, _experiment)(args)
    except ValidationError as exc:
        print(f"[X] invalid configuration ({exc.error_count()} error(s)):", file=sys.stderr)
        for error in exc.errors():
            location = ".".join(str(part) for part in error["loc"]) or "<root>"
            print(f"    {location}: {error['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"[X] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactsError as exc:
        print(f"[X] {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except PTSegError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
