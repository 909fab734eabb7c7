#!/usr/bin/env python3
"""
Noise Source Estimator CLI

Command-line entry point for the full pipeline: simulate sensor noise from
camera metadata, generate labeled datasets, post-process real noise
sessions, train and run estimators, evaluate them and benchmark runtime.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError
from rich.console import Console

from config import VARIANTS, NoiseSourceConfig, get_config, reset_config
from result_processor import (
    BENCH_COLUMNS,
    FIT_COLUMNS,
    LEVEL_COLUMNS,
    LOSS_COLUMNS,
    METRIC_COLUMNS,
    SENSITIVITY_COLUMNS,
    ResultProcessor,
)
from tools import dataset, estimator, evaluation, realnoise
from tools.errors import DomainError, NoiseSourceError
from tools.image_io import read_8bit, write_grayscale
from tools.noise_model import (
    SWEEPABLE,
    VARIABLE_FIELDS,
    CameraMetadata,
    Patch,
    SensorType,
    corrupt_patch,
    predict_sigmas,
)
from tools.utils import hash_files, load_env_file, read_key_value_file

logger = logging.getLogger("nse-cli")

# Rich console for formatted output
console = Console()

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

SCENARIOS = ("none", "add-gaussian", "double-thermal-white-noise", "double-temperature")


def setup_logging(level: str, run_log: Optional[str]) -> None:
    """Configure root logging once per invocation: stderr plus the run log."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if run_log:
        Path(run_log).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(run_log, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, handlers=handlers, force=True)


# -- argument parsing --------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_metadata_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("camera metadata (unspecified fields default to their maxima)")
    group.add_argument("--meta", help="key=value metadata file")
    for name in VARIABLE_FIELDS:
        if name == "sensor_type":
            group.add_argument("--sensor-type", choices=[t.value for t in SensorType], type=str.upper)
        else:
            group.add_argument(_flag(name), type=float, dest=name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisesrc", description="Camera noise source estimation toolkit")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--env", help="Path to .env file")
    parser.add_argument("--seed", type=int, help="Random seed (default: from config)")
    parser.add_argument("--threads", type=int, help="Worker threads (default: from config)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--run-log", help="Run log path (default: from config)")
    sub = parser.add_subparsers(dest="command", required=True)

    # --seed and --threads are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    simulate = sub.add_parser("simulate", parents=[common], help="Predict noise levels from metadata")
    add_metadata_arguments(simulate)
    simulate.add_argument("--intensity", type=float, default=128.0, help="Mean intensity in DN")
    simulate.add_argument("--sample", type=int, help="Also corrupt a flat NxN patch")
    simulate.add_argument("--out-image", default="simulated.pgm", help="Sampled image path (PGM/PNG)")
    simulate.add_argument("--unclipped", action="store_true", help="Report sigmas without clipping")
    simulate.add_argument("--csv", help="Write levels as CSV")

    gen = sub.add_parser("gen-dataset", parents=[common], help="Generate a labeled dataset")
    gen.add_argument("--clean-dir", help="Directory of clean PGM/PNG images (default: synthetic images)")
    gen.add_argument("--synthetic-images", type=int, default=8, help="Synthetic images when --clean-dir is absent")
    gen.add_argument("--out", required=True, help="Dataset directory")
    gen.add_argument("--count", type=int, help="Number of records")
    gen.add_argument("--mismatch-prob", type=float, help="Probability of a re-drawn camera gain")
    gen.add_argument("--patch-size", type=int, help="Patch size in pixels")
    gen.add_argument("--validate", action="store_true", help="Read back and validate the written dataset")

    real = sub.add_parser("process-realnoise", parents=[common], help="Post-process a dark/bias frame session")
    real.add_argument("--session-dir", required=True)
    real.add_argument("--out", required=True)
    real.add_argument("--s-fpn", type=int, help="Images used for the FPN mean")

    train = sub.add_parser("train", parents=[common], help="Train an estimator")
    train.add_argument("--dataset", required=True)
    train.add_argument("--variant", choices=list(VARIANTS))
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--scale", type=float, dest="channel_scale", help="Channel width scale")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float, dest="learning_rate")
    train.add_argument("--loss-csv", help="Write the loss curve as CSV")

    est = sub.add_parser("estimate", parents=[common], help="Estimate noise levels of an image")
    est.add_argument("--model", required=True)
    est.add_argument("--image", required=True, help="PGM/PNG grayscale image")
    add_metadata_arguments(est)
    est.add_argument("--csv", help="Write per-patch estimates as CSV")

    ev = sub.add_parser("evaluate", parents=[common], help="Evaluate an estimator on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--scenario", choices=SCENARIOS, default="none")
    ev.add_argument("--sigma-n", type=float, help="Added noise sigma for the add-gaussian scenario")
    ev.add_argument("--baseline", action="store_true", help="Also report the block baseline on sigma_total")
    ev.add_argument("--csv", help="Write the metric report as CSV")

    sweep = sub.add_parser("sweep", parents=[common], help="Sensitivity sweep (physical model, optionally the estimator)")
    sweep.add_argument("--model", help="Checkpoint to compare against")
    sweep.add_argument("--params", nargs="+", choices=list(SWEEPABLE), default=list(SWEEPABLE))
    sweep.add_argument("--n-samples", type=int, default=10)
    sweep.add_argument("--intensity", type=float, default=128.0)
    sweep.add_argument("--sensor-type", choices=[t.value for t in SensorType], type=str.upper, default="CMOS")
    sweep.add_argument("--csv", help="Write the paired table as CSV")

    bench = sub.add_parser("bench", parents=[common], help="Runtime per patch")
    bench.add_argument("--model", required=True)
    bench.add_argument("--patches", type=int, dest="bench_patches")
    bench.add_argument("--repetitions", type=int, dest="bench_repetitions")
    bench.add_argument("--warmup", type=int, dest="bench_warmup")
    bench.add_argument("--csv", help="Write the result as CSV")

    return parser


CONFIG_FLAGS = (
    "seed",
    "threads",
    "log_level",
    "run_log",
    "variant",
    "channel_scale",
    "patch_size",
    "epochs",
    "batch_size",
    "learning_rate",
    "mismatch_prob",
    "s_fpn",
    "sigma_n",
    "bench_patches",
    "bench_repetitions",
    "bench_warmup",
)


def resolve_config(args: argparse.Namespace) -> NoiseSourceConfig:
    """defaults < config file < environment < flags"""
    overrides = {name: getattr(args, name, None) for name in CONFIG_FLAGS}
    overrides["record_count"] = getattr(args, "count", None)
    reset_config()
    return get_config(args.config, **overrides)


def metadata_from_args(args: argparse.Namespace) -> CameraMetadata:
    values: Dict[str, Any] = {}
    if args.meta:
        for key, value in read_key_value_file(args.meta).items():
            if key in VARIABLE_FIELDS:
                values[key] = value
    for name in VARIABLE_FIELDS:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    return CameraMetadata.maxima().with_values(**values)


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    meta = metadata_from_args(args)
    levels = predict_sigmas(meta, args.intensity, clip_aware=not args.unclipped)
    header = ["intensity", *LEVEL_COLUMNS]
    rows = ResultProcessor.levels_rows([levels], [args.intensity])
    console.print(ResultProcessor.to_table("Predicted noise levels (DN)", header, rows))
    if args.csv:
        ResultProcessor.write_csv(args.csv, header, rows, config.config_hash())

    if args.sample:
        clean = Patch.constant(args.intensity, args.sample, args.sample)
        noisy, _ = corrupt_patch(clean, meta, config.seed)
        write_grayscale(args.out_image, noisy.intensities, 8)
        residual = noisy.intensities.astype(float) - clean.intensities
        console.print(f"[dim]Sampled {args.sample}x{args.sample} patch: std={residual.std():.4f} DN[/dim]")
        console.print(f"[bold]sha256[/bold]: {hash_files([args.out_image])}")


def cmd_gen_dataset(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    if args.clean_dir:
        images = dataset.load_clean_corpus(args.clean_dir)
    else:
        size = max(2 * config.patch_size, 64)
        images = [dataset.synthetic_clean_image(size, size, seed=config.seed + i) for i in range(args.synthetic_images)]
        logger.info(f"Using {len(images)} synthetic clean images ({size}x{size})")

    records = dataset.generate_dataset(
        images,
        count=config.record_count,
        seed=config.seed,
        mismatch_prob=config.mismatch_prob,
        patch_size=config.patch_size,
        threads=config.threads,
    )
    dataset.write_dataset(records, args.out, seed=config.seed, mismatch_prob=config.mismatch_prob, patch_size=config.patch_size)
    if args.validate:
        dataset.read_dataset(args.out)
        console.print("[bold green]Dataset validated[/bold green]")
    console.print(f"[bold]records[/bold]: {len(records)}")
    console.print(f"[bold]sha256[/bold]: {dataset.dataset_hash(args.out)}")


def cmd_process_realnoise(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    session = realnoise.load_session(args.session_dir)
    processed = realnoise.process_session(session, config.seed, config.s_fpn, config.threads)
    realnoise.write_processed_session(processed, args.out)
    rows = ResultProcessor.fit_rows(processed, session.exposures)
    ResultProcessor.write_csv(Path(args.out) / "fits.csv", FIT_COLUMNS, rows, config.config_hash())
    console.print(ResultProcessor.to_table("Per-pair fits (native DN)", FIT_COLUMNS, rows))


def cmd_train(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    records = dataset.read_dataset(args.dataset)
    manifest = dataset.read_manifest(args.dataset)
    variant = estimator.ModelVariant(
        kind=estimator.VariantKind.parse(config.variant),
        channel_scale=config.channel_scale,
        patch_size=int(manifest["patch_width"]),
    )
    settings = estimator.TrainingSettings.from_config(config)
    model, losses = estimator.train(variant, records, settings, seed=config.seed, checkpoint=args.out)
    if args.loss_csv:
        ResultProcessor.write_csv(args.loss_csv, LOSS_COLUMNS, ResultProcessor.loss_rows(losses), config.config_hash())
    console.print(f"[bold]final loss[/bold]: {losses[-1]:.6g} (first epoch {losses[0]:.6g})")
    console.print(f"[bold]sha256[/bold]: {hash_files([args.out])}")


def cmd_estimate(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    model = estimator.load_model(args.model)
    image = read_8bit(args.image)
    meta = metadata_from_args(args) if model.kind.uses_metadata else None
    result = estimator.estimate_image(model, image, meta)

    if model.kind.branched:
        header = ["patch", *LEVEL_COLUMNS]
        rows = ResultProcessor.levels_rows([e.levels for e in result.estimates])
    else:
        header = ["patch", "sigma_total"]
        rows = [[i, e.sigma_total] for i, e in enumerate(result.estimates)]
    if args.csv:
        ResultProcessor.write_csv(args.csv, header, rows, config.config_hash())

    mean = result.mean
    if model.kind.branched:
        console.print(
            f"{mean['sigma_pn']:.6f} {mean['sigma_dcsn']:.6f} {mean['sigma_rn']:.6f} "
            f"{mean['xi']:.6f} {mean['sigma_total']:.6f}"
        )
    else:
        console.print(f"{mean['sigma_total']:.6f}")
    logger.info(f"Estimated {len(result.estimates)} patches of {args.image}")


def cmd_evaluate(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    model = estimator.load_model(args.model)
    records = dataset.read_dataset(args.dataset)
    clamp = False
    if args.scenario == "add-gaussian":
        records = evaluation.scenario_add_gaussian([r for r in records if not r.mismatched], config.sigma_n, config.seed)
    elif args.scenario.startswith("double-"):
        param = "thermal_white_noise" if args.scenario == "double-thermal-white-noise" else "sensor_temperature"
        records = evaluation.scenario_double_param([r for r in records if not r.mismatched], param)
        clamp = True

    estimates, report = evaluation.evaluate_records(model, records, clamp_metadata=clamp)
    rows = ResultProcessor.metrics_rows(report)
    if args.baseline:
        baseline = [evaluation.TotalOnly(evaluation.baseline_block_estimate(r.noisy)) for r in records]
        base_report = evaluation.compute_metrics(baseline, [r.truth for r in records], ("total",))
        rows += [["baseline_" + row[0], *row[1:]] for row in ResultProcessor.metrics_rows(base_report)]
    if args.csv:
        ResultProcessor.write_csv(args.csv, METRIC_COLUMNS, rows, config.config_hash())
    console.print(ResultProcessor.to_table(f"Metrics ({args.scenario})", METRIC_COLUMNS, rows))

    if model.kind.branched and args.scenario == "none":
        summary = evaluation.xi_detection_summary(estimates, records)
        console.print(
            f"[dim]median |xi|: matched {summary['matched_median_abs_xi']:.4f}, "
            f"mismatched {summary['mismatched_median_abs_xi']:.4f}[/dim]"
        )


def cmd_sweep(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    model = estimator.load_model(args.model) if args.model else None
    fixed = CameraMetadata.maxima(SensorType(args.sensor_type))
    pairs = evaluation.compare_sensitivity(model, fixed, args.params, args.n_samples, args.intensity)
    rows = ResultProcessor.sensitivity_rows(pairs)
    header = SENSITIVITY_COLUMNS if model is not None else SENSITIVITY_COLUMNS[:3]
    rows = rows if model is not None else [row[:3] for row in rows]
    if args.csv:
        ResultProcessor.write_csv(args.csv, header, rows, config.config_hash())
    console.print(ResultProcessor.to_table("Sensitivity sweep (sigma_total, DN)", header, rows))


def cmd_bench(args: argparse.Namespace, config: NoiseSourceConfig) -> None:
    model = estimator.load_model(args.model)
    result = evaluation.runtime_bench(
        model,
        n_patches=config.bench_patches,
        repetitions=config.bench_repetitions,
        warmup=config.bench_warmup,
        threads=config.threads,
        seed=config.seed,
    )
    rows = ResultProcessor.bench_rows(result)
    if args.csv:
        ResultProcessor.write_csv(args.csv, BENCH_COLUMNS, rows, config.config_hash())
    console.print(ResultProcessor.to_table("Runtime per patch", BENCH_COLUMNS, rows))


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-dataset": cmd_gen_dataset,
    "process-realnoise": cmd_process_realnoise,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Command-line entry point; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.env:
        load_env_file(args.env)

    try:
        config = resolve_config(args)
        setup_logging(config.log_level, config.run_log)
        logger.info(f"noisesrc {args.command}: config_hash={config.config_hash()}")
        for key, value in config.as_dict().items():
            logger.info(f"config {key}={value}")
        COMMANDS[args.command](args, config)
        return 0
    except (DomainError, ValidationError) as e:
        console.print(f"[bold red]Error: {str(e)}[/bold red]")
        return 2
    except (NoiseSourceError, OSError) as e:
        console.print(f"[bold red]Error: {str(e)}[/bold red]")
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        console.print("\n[bold yellow]KeyboardInterrupt: Exiting[/bold yellow]")
        sys.exit(1)
