"""Command-line entry point: python -m src.main <command> [options]."""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from src.agents.experiment_runner import (
    ExperimentRunner,
    RateProxyReport,
    match_pairs,
    read_records_csv,
)
from src.models.config import get_settings
from src.models.errors import QTuneError
from src.models.experiment import ExperimentRecord, TrainConfig, TrainMode
from src.utils.logger import setup_logger

console = Console()

DEFAULT_QUALITIES = list(range(5, 95, 5))


def parse_list(text: str, cast=float) -> List:
    """Comma-separated values, e.g. "10,50,90"."""
    try:
        return [cast(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list: {text}")


def print_summary(title: str, records: Sequence[ExperimentRecord]) -> None:
    """Show the averaged curve points."""
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for column in ("Mode", "Setting", "bpp", "PSNR [dB]", "MS-SSIM"):
        table.add_column(column)
    for r in records:
        if r.image_id != ExperimentRecord.MEAN_ID:
            continue
        table.add_row(
            r.mode.value,
            f"{r.setting:g}",
            f"{r.bpp:.4f}",
            f"{r.psnr_db:.2f}",
            "-" if r.ms_ssim is None else f"{r.ms_ssim:.4f}",
        )
    console.print(table)
    failed = sum(1 for r in records if r.error is not None)
    if failed:
        console.print(f"[bold red]{failed} job(s) failed; see the error column[/bold red]")


def print_proxy_report(report: RateProxyReport) -> None:
    table = Table(title="Rate proxy vs bpp (Spearman)", show_header=True, header_style="bold blue")
    for column in ("Image", "rate_q", "rate_attention", "combined"):
        table.add_column(column)
    for name, values in report.correlations.items():
        table.add_row(name, *("undefined" if v is None else f"{v:.3f}" for v in values.values()))
    console.print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="qtune - learn JPEG quantization tables and attention maps by gradient descent"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Set logging level (default: LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("baseline-sweep", help="Encode images at IJG quality factors")
    sweep.add_argument("--input", required=True, type=Path, help="Image file or directory")
    sweep.add_argument("--out", type=Path, help="Output CSV (default: <output_dir>/baseline.csv)")
    sweep.add_argument(
        "--qualities",
        type=lambda s: parse_list(s, int),
        default=DEFAULT_QUALITIES,
        help="Comma-separated quality factors (default: 5,10,...,90)",
    )

    opt = sub.add_parser("optimize", help="Learn tables (and attention) per λ and emit JPEG files")
    opt.add_argument("--input", required=True, type=Path, help="Image file or directory")
    opt.add_argument("--out", type=Path, help="Output directory (default: <output_dir>/optimize)")
    opt.add_argument("--lambdas", type=parse_list, help="Comma-separated λ values in [1e-4, 1e-1]")
    opt.add_argument("--mode", choices=[m.value for m in TrainMode], help="Optimization regime")
    opt.add_argument("--config", type=Path, help="key=value hyperparameter file")
    opt.add_argument("--seed", type=int, help="Random seed")
    opt.add_argument("--steps", type=int, help="Optimizer steps")
    opt.add_argument("--grad-check", action="store_true", help="Finite-difference gradient check first")

    proxy = sub.add_parser("rate-proxy-report", help="Rank-correlate rate losses with true bpp")
    proxy.add_argument("--input", required=True, type=Path, help="records.csv from optimize")
    proxy.add_argument("--out", type=Path, help="Output CSV (default: <output_dir>/rate_proxy.csv)")

    evaluate = sub.add_parser("evaluate", help="Score existing JPEG files against their sources")
    evaluate.add_argument("--input", required=True, type=Path, help="Source image file or directory")
    evaluate.add_argument("--jpegs", required=True, type=Path, help="JPEG file or directory")
    evaluate.add_argument("--out", type=Path, help="Output CSV (default: <output_dir>/evaluate.csv)")

    return parser


def run(args: argparse.Namespace) -> int:
    settings = get_settings()
    output_dir = Path(settings.output_dir)
    runner = ExperimentRunner()

    if args.command == "baseline-sweep":
        records = runner.cmd_baseline_sweep(
            args.input, args.qualities, args.out or output_dir / "baseline.csv"
        )
        print_summary("Baseline JPEG", records)

    elif args.command == "optimize":
        config = TrainConfig.from_sources(
            args.config,
            overrides={
                "lambdas": args.lambdas,
                "mode": args.mode,
                "seed": args.seed,
                "steps": args.steps,
            },
        )
        records = runner.cmd_optimize(
            args.input, config, args.out or output_dir / "optimize", grad_check=args.grad_check
        )
        print_summary(f"Optimized ({config.mode.value})", records)

    elif args.command == "rate-proxy-report":
        report = runner.cmd_rate_proxy_report(
            read_records_csv(args.input), args.out or output_dir / "rate_proxy.csv"
        )
        print_proxy_report(report)

    elif args.command == "evaluate":
        records = runner.cmd_evaluate(
            match_pairs(args.input, args.jpegs), args.out or output_dir / "evaluate.csv"
        )
        print_summary("Evaluation", records)

    return 1 if runner.stats["failed"] else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point with CLI argument parsing."""
    args = build_parser().parse_args(argv)
    settings = get_settings()

    # Setup logging
    setup_logger(log_level=args.log_level or settings.log_level, log_file=settings.log_file)

    logger.info(f"qtune {args.command} starting...")
    try:
        return run(args)
    except (QTuneError, ValueError, ValidationError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
