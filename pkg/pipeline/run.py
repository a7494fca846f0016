"""
Command-line entry point.

    sams-vae simulate        --config sim.cfg --out data/sim
    sams-vae train           --config train.cfg --dataset data/sim --out runs/sams [--resume]
    sams-vae eval            --checkpoint runs/sams/best.ckpt --dataset data/sim --K 100 [--ate]
    sams-vae recovery-study  --config study.cfg --out runs/study
    sams-vae export-latents  --checkpoint runs/sams/best.ckpt --out runs/sams/latents

Exit codes: 0 success, 1 invalid configuration or dataset, 2 runtime or
numerical failure.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.config import LogConfig, RunConfig, load_run_config
from core.exceptions import (ConfigError, DatasetError, ModelError, SamsVaeError,
                             ValidationError)
from pipeline.checkpoint import load_model
from pipeline.data import load_dataset
from pipeline.evaluation import evaluate, export_latents, load_true_masks
from pipeline.orchestrator import prepare_splits, train
from pipeline.simulate import run_recovery_study, simulate_dataset, write_simulation
from utils.logger import get_enhanced_logger, setup_logging

logger = get_enhanced_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

# errors the user fixes by changing inputs
INVALID_INPUT = (ConfigError, DatasetError, ModelError)


class CliParser(argparse.ArgumentParser):
    """Argument errors become ValidationError so they share exit code 1."""

    def error(self, message):
        raise ValidationError(message, field="arguments", suggestion="Run with --help")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="random seed of the command")
    common.add_argument("--out", help="output directory")
    common.add_argument("--control", help="name of the control perturbation")
    common.add_argument("--threads", type=int, help="worker threads for particle evaluation")

    parser = CliParser(prog="sams-vae", description="Sparse additive mechanism shift VAE")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("simulate", parents=[common], help="generate a synthetic dataset")

    train_cmd = commands.add_parser("train", parents=[common], help="fit a model")
    train_cmd.add_argument("--dataset", help="dataset directory with X.csv and D.csv")
    train_cmd.add_argument("--resume", nargs="?", const=True, default=False,
                           help="continue from OUT/last.ckpt or the given checkpoint")

    eval_cmd = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", type=Path, required=True)
    eval_cmd.add_argument("--dataset", help="dataset directory with X.csv and D.csv")
    eval_cmd.add_argument("--K", dest="k", type=int, help="IWELBO particles")
    eval_cmd.add_argument("--split", help="train, val or test")
    eval_cmd.add_argument("--ate", action="store_true", help="compute ATE-Pearson")

    study_cmd = commands.add_parser("recovery-study", parents=[common],
                                    help="mask-recovery grid on simulated data")
    study_cmd.add_argument("--workers", type=int, help="parallel grid cells")

    export_cmd = commands.add_parser("export-latents", parents=[common],
                                     help="write masks.csv and embeddings.csv")
    export_cmd.add_argument("--checkpoint", type=Path, required=True)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values as flat config keys; unset flags are None and leave the file value."""
    seed_key = {"simulate": "sim_seed", "train": "seed", "eval": "eval_seed"}.get(args.command)
    overrides: Dict[str, Any] = {
        "out": args.out,
        "control": args.control,
        "threads": args.threads,
        "dataset": getattr(args, "dataset", None),
        "eval_k": getattr(args, "k", None),
        "eval_split": getattr(args, "split", None),
        "eval_ate": True if getattr(args, "ate", False) else None,
        "study_workers": getattr(args, "workers", None),
    }
    if args.seed is not None:
        if seed_key:
            overrides[seed_key] = args.seed
        elif args.command == "recovery-study":
            overrides["study_seeds"] = (args.seed,)
    return overrides


def _require_dataset(config: RunConfig) -> str:
    if config.data.dataset is None:
        raise ValidationError("A dataset directory is required", field="--dataset",
                              suggestion="Pass --dataset DIR or set dataset = DIR")
    return config.data.dataset


def _load(config: RunConfig):
    likelihood = config.model.likelihood
    ds = load_dataset(_require_dataset(config), control=config.data.control,
                      mode="auto" if likelihood == "auto" else likelihood)
    return prepare_splits(ds, config.data)


def _executor(config: RunConfig):
    threads = config.train.threads
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext()


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_simulate(config: RunConfig) -> Path:
    ds, truth = simulate_dataset(config.sim)
    return write_simulation(ds, truth, config.sim, config.out)


def cmd_train(config: RunConfig, resume=False) -> Path:
    ds = _load(config)
    result = train(ds, config, config.out, resume=resume)
    if result.interrupted:
        logger.warning(f"Stopped at step {result.steps_completed}; rerun with --resume to continue")
    return result.best_checkpoint


def cmd_eval(config: RunConfig, checkpoint: Path) -> Path:
    restored = load_model(checkpoint)
    ds = _load(config)
    if config.eval.ate and ds.control is None:
        raise ValidationError("ATE needs a control perturbation", field="--control",
                              suggestion="Pass --control NAME or add '# control=NAME' to D.csv")

    with _executor(config) as executor:
        report = evaluate(restored, ds, config.eval,
                          true_masks=load_true_masks(config.data.dataset), executor=executor)
    path = report.write(config.out, gene_names=list(ds.gene_names))
    logger.success(f"Evaluation report written to {path}")
    return path


def cmd_recovery_study(config: RunConfig) -> Path:
    run_recovery_study(config, config.out)
    return Path(config.out) / "recovery.csv"


def cmd_export_latents(config: RunConfig, checkpoint: Path) -> List[Path]:
    return export_latents(checkpoint, config.out)


def run_command(args: argparse.Namespace, config: RunConfig) -> None:
    if args.command == "simulate":
        cmd_simulate(config)
    elif args.command == "train":
        cmd_train(config, resume=args.resume)
    elif args.command == "eval":
        cmd_eval(config, args.checkpoint)
    elif args.command == "recovery-study":
        cmd_recovery_study(config)
    elif args.command == "export-latents":
        cmd_export_latents(config, args.checkpoint)


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging(log_config=LogConfig.from_env())
    try:
        args = build_parser().parse_args(argv)
        config = load_run_config(args.config, overrides_from_args(args))
        setup_logging(log_config=config.logging)

        result = config.validate_all()
        if not result.is_valid:
            logger.failure(config.validation_report(result))
            return EXIT_INVALID
        if result.warnings:
            logger.warning(config.validation_report(result))

        run_command(args, config)
        return EXIT_OK
    except INVALID_INPUT as e:
        logger.failure(str(e))
        return EXIT_INVALID
    except SamsVaeError as e:
        logger.failure(str(e))
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_RUNTIME
    except Exception as e:
        logger.failure(f"{type(e).__name__}: {e}")
        logger.debug("Traceback of the failure", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
