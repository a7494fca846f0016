"""
Training loop: minibatch stochastic variational inference with AdamW,
periodic validation and best-validation checkpoint selection.

Files written to the run directory:

    metrics.csv   step, train_neg_elbo, val_elbo, wall_ms
    best.ckpt     parameters at the best validation ELBO
    last.ckpt     parameters plus optimizer state, used by --resume
"""

import math
import signal
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.config import DataConfig, ModelConfig, RunConfig
from core.exceptions import GradientError, ModelError, NonFiniteError, SplitError, TrainingError
from core.ndcore import backward, no_grad
from pipeline.checkpoint import RestoredModel, load_model, save_model
from pipeline.data import COUNTS, EncoderNormalizer, PerturbDataset, holdout_combinations, make_splits
from pipeline.inference import AdamW, VariationalParams, elbo, elbo_minibatch, particle_seeds
from pipeline.models import GenerativeParams
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

METRIC_COLUMNS = ("step", "train_neg_elbo", "val_elbo", "wall_ms")
METRICS_FILE = "metrics.csv"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


def step_seed(seed: int, step: int) -> int:
    """Seed of the latent draws at `step`; step 0 is reserved for validation."""
    return particle_seeds([int(seed), int(step)], 1)[0]


def batch_indices(train_idx: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    """
    Rows of the batch used at 1-based `step`. Each epoch is a seeded
    permutation of the training rows, so any step can be recomputed on resume.
    """
    n = train_idx.size
    size = min(batch_size, n)
    per_epoch = math.ceil(n / size)
    epoch, position = divmod(step - 1, per_epoch)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return train_idx[order[position * size:(position + 1) * size]]


def resolve_likelihood(model_cfg: ModelConfig, ds: PerturbDataset) -> str:
    likelihood = ds.mode if model_cfg.likelihood == "auto" else model_cfg.likelihood
    if likelihood == COUNTS and ds.mode != COUNTS:
        raise ModelError("The counts likelihood needs integer count data", field="likelihood",
                         value=likelihood, suggestion="Use likelihood = gaussian or auto")
    return likelihood


def build_model(ds: PerturbDataset, model_cfg: ModelConfig,
                seed: int) -> Tuple[GenerativeParams, VariationalParams]:
    """Fresh generative and variational parameters sized for `ds`."""
    generative_seed, variational_seed = particle_seeds(seed, 2)
    gp = GenerativeParams(kind=model_cfg.kind, n_genes=ds.n_genes,
                          n_perturbations=ds.n_perturbations, latent_dim=model_cfg.latent_dim,
                          alpha=model_cfg.alpha, beta=model_cfg.beta,
                          decoder_hidden=model_cfg.decoder_hidden,
                          likelihood=resolve_likelihood(model_cfg, ds), seed=generative_seed,
                          median_library=ds.median_library("train"))
    vp = VariationalParams(kind=model_cfg.kind, mode=model_cfg.mode, n_genes=ds.n_genes,
                           n_perturbations=ds.n_perturbations, latent_dim=model_cfg.latent_dim,
                           encoder_hidden=model_cfg.encoder_hidden,
                           embedding_hidden=model_cfg.embedding_hidden,
                           temperature=model_cfg.temperature, seed=variational_seed)
    return gp, vp


def prepare_splits(ds: PerturbDataset, data_cfg: DataConfig) -> PerturbDataset:
    """Keep a precomputed split, otherwise draw one; then apply the combination hold-out."""
    if not ds.has_precomputed_split():
        ds = make_splits(ds, data_cfg.split_fractions, seed=data_cfg.split_seed,
                         stratify=data_cfg.stratify)
    if data_cfg.holdout_fraction > 0:
        ds = holdout_combinations(ds, data_cfg.holdout_fraction, seed=data_cfg.split_seed)
    return ds


@dataclass
class TrainingResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics: Path
    steps_completed: int
    best_step: int
    best_val_elbo: float
    interrupted: bool = False


class Trainer:
    """Owns the parameters and optimizer of one training run."""

    def __init__(self, ds: PerturbDataset, config: RunConfig, out_dir: Union[str, Path]):
        self.ds = ds
        self.config = config
        self.train_cfg = config.train
        self.out_dir = Path(out_dir)

        self.train_idx = ds.indices("train")
        if self.train_idx.size == 0:
            raise SplitError("The dataset has no training cells", field="split",
                             suggestion="Provide obs.csv split tags or set split_fractions")
        self.val_idx = ds.indices("val")
        if self.val_idx.size == 0:
            logger.warning("No validation cells; checkpoints are selected on the training ELBO")

        self.n_t = ds.perturbation_counts("train")
        self.X = ds.X
        self.D = ds.D.astype(np.float64)
        self.l = ds.library_sizes
        self.normalizer = EncoderNormalizer.fit(ds)
        self.X_enc = self.normalizer(ds.X)

        self.gp, self.vp = build_model(ds, config.model, self.train_cfg.seed)
        self.optimizer = self._make_optimizer()

        self.start_step = 0
        self.best_val = -math.inf
        self.best_step = 0
        self.history: List[Dict[str, Any]] = []
        self.running = True

        n_params = sum(p.size for p in self.optimizer.params)
        logger.info(f"{config.model.kind}-vae ({self.vp.mode}, {self.gp.likelihood}): "
                    f"{n_params} parameters, {self.train_idx.size} train / "
                    f"{self.val_idx.size} val cells")

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / METRICS_FILE

    def _make_optimizer(self) -> AdamW:
        return AdamW(self.gp.parameters() + self.vp.parameters(),
                     lr=self.train_cfg.learning_rate, weight_decay=self.train_cfg.weight_decay)

    # resume --------------------------------------------------------------------

    def resume(self, path: Optional[Union[str, Path]] = None) -> "Trainer":
        """Continue from a last.ckpt: parameters, Adam moments, step counter and metric history."""
        path = Path(path) if path is not None else self.out_dir / LAST_CHECKPOINT
        restored: RestoredModel = load_model(path)
        if restored.manifest.get("train_seed") != self.train_cfg.seed:
            logger.warning(f"Resuming with seed {self.train_cfg.seed}, checkpoint used "
                           f"{restored.manifest.get('train_seed')}")

        self.gp, self.vp, self.normalizer = restored.gp, restored.vp, restored.normalizer
        self.X_enc = self.normalizer(self.ds.X)
        self.optimizer = self._make_optimizer()
        self.optimizer.load_state_arrays(restored.manifest.get("optimizer_step", restored.step),
                                         restored.optimizer_arrays)

        self.start_step = restored.step
        best = restored.manifest.get("best_val_elbo")
        self.best_val = -math.inf if best is None else float(best)
        self.best_step = int(restored.manifest.get("best_step", 0))

        if self.metrics_path.is_file():
            frame = pd.read_csv(self.metrics_path)
            self.history = frame[frame["step"] <= self.start_step].to_dict("records")
        logger.info(f"Resumed from {path} at step {self.start_step}")
        return self

    # signals -------------------------------------------------------------------

    def signal_handler(self, signum, frame):
        logger.info("Shutdown signal received, stopping after the current step...")
        self.running = False

    def _install_signal_handlers(self) -> Dict[int, Any]:
        if threading.current_thread() is not threading.main_thread():
            return {}
        return {signum: signal.signal(signum, self.signal_handler)
                for signum in (signal.SIGINT, signal.SIGTERM)}

    @staticmethod
    def _restore_signal_handlers(previous: Dict[int, Any]) -> None:
        for signum, handler in previous.items():
            signal.signal(signum, handler)

    # loop ----------------------------------------------------------------------

    def run(self) -> TrainingResult:
        cfg = self.train_cfg
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.start_step >= cfg.steps:
            logger.info(f"Nothing to do: checkpoint is at step {self.start_step} of {cfg.steps}")
            return self._result(self.start_step)

        previous_handlers = self._install_signal_handlers()
        executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        wall_offset = float(self.history[-1]["wall_ms"]) if self.history else 0.0
        started = time.perf_counter()

        step = self.start_step
        window: List[float] = []
        try:
            while step < cfg.steps and self.running:
                step += 1
                window.append(self._train_step(step, executor))
                if step % cfg.checkpoint_every == 0 or step == cfg.steps or not self.running:
                    wall_ms = wall_offset + (time.perf_counter() - started) * 1000.0
                    self._checkpoint(step, window, wall_ms, executor)
                    window = []
        finally:
            if executor is not None:
                executor.shutdown()
            self._restore_signal_handlers(previous_handlers)

        elapsed = time.perf_counter() - started
        logger.performance(f"{step - self.start_step} steps in {elapsed:.1f}s "
                           f"({(step - self.start_step) / max(elapsed, 1e-9):.1f} steps/s)")
        if not self.running:
            logger.warning(f"Training interrupted at step {step}; resume from {LAST_CHECKPOINT}")
        else:
            logger.success(f"Training finished: best val ELBO {self.best_val:.4f} at step "
                           f"{self.best_step}")
        return self._result(step)

    def _train_step(self, step: int, executor: Optional[ThreadPoolExecutor]) -> float:
        cfg = self.train_cfg
        batch = batch_indices(self.train_idx, cfg.batch_size, cfg.seed, step)
        try:
            objective = elbo_minibatch(batch, self.X, self.X_enc, self.D, self.l, self.vp, self.gp,
                                       self.n_t, particles=cfg.particles,
                                       seed=step_seed(cfg.seed, step), executor=executor)
            loss = -objective
            grads = backward(loss)
        except NonFiniteError as e:
            raise TrainingError(f"Non-finite {e.term} at step {step}", step=step,
                                term=e.term) from e
        except GradientError as e:
            raise TrainingError(f"Non-finite loss at step {step}: {e.args[0]}", step=step,
                                term="train_neg_elbo") from e

        for param, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"Non-finite gradient at step {step}", step=step,
                                    term=f"grad {param.name}")
        self.optimizer.step(grads)
        return float(loss.item())

    def validation_elbo(self, executor: Optional[ThreadPoolExecutor] = None) -> float:
        """ELBO of the validation rows (training rows if there are none) at a fixed seed."""
        idx = self.val_idx if self.val_idx.size else self.train_idx
        l = None if self.l is None else self.l[idx]
        with no_grad():
            value = elbo(self.X[idx], self.X_enc[idx], self.D[idx], l, self.vp, self.gp,
                         particles=self.train_cfg.val_particles,
                         seed=step_seed(self.train_cfg.seed, 0), executor=executor)
        return float(value.item())

    def _checkpoint(self, step: int, window: List[float], wall_ms: float,
                    executor: Optional[ThreadPoolExecutor]) -> None:
        try:
            val = self.validation_elbo(executor)
        except NonFiniteError as e:
            raise TrainingError(f"Non-finite validation {e.term} at step {step}", step=step,
                                term=f"val_elbo: {e.term}") from e

        train_neg_elbo = float(np.mean(window))
        self.history.append({"step": step, "train_neg_elbo": train_neg_elbo, "val_elbo": val,
                             "wall_ms": int(round(wall_ms))})
        pd.DataFrame(self.history, columns=list(METRIC_COLUMNS)).to_csv(
            self.metrics_path, index=False, lineterminator="\n")

        if val > self.best_val:
            self.best_val, self.best_step = val, step
            save_model(self.out_dir / BEST_CHECKPOINT, self.gp, self.vp, self.normalizer,
                       extra=self._manifest(step))
        save_model(self.out_dir / LAST_CHECKPOINT, self.gp, self.vp, self.normalizer,
                   extra=self._manifest(step), optimizer=self.optimizer)

        logger.info(f"step {step}/{self.train_cfg.steps}  train -ELBO {train_neg_elbo:.4f}  "
                    f"val ELBO {val:.4f}  best {self.best_val:.4f} @ {self.best_step}")

    def _manifest(self, step: int) -> Dict[str, Any]:
        ds = self.ds
        return {
            "step": step,
            "best_step": self.best_step,
            "best_val_elbo": self.best_val if math.isfinite(self.best_val) else None,
            "train_seed": self.train_cfg.seed,
            "dataset": {
                "mode": ds.mode,
                "control": ds.control,
                "gene_names": list(ds.gene_names),
                "perturbation_names": list(ds.perturbation_names),
                "n_t": [int(n) for n in self.n_t],
            },
            "config": self.config.to_flat_dict(),
        }

    def _result(self, step: int) -> TrainingResult:
        return TrainingResult(out_dir=self.out_dir, best_checkpoint=self.out_dir / BEST_CHECKPOINT,
                              last_checkpoint=self.out_dir / LAST_CHECKPOINT,
                              metrics=self.metrics_path, steps_completed=step,
                              best_step=self.best_step, best_val_elbo=self.best_val,
                              interrupted=not self.running)


def train(ds: PerturbDataset, config: RunConfig, out_dir: Union[str, Path],
          resume: Union[bool, str, Path] = False) -> TrainingResult:
    """Train one model on `ds`; `resume` may be True (out_dir/last.ckpt) or a checkpoint path."""
    trainer = Trainer(ds, config, out_dir)
    if resume:
        trainer.resume(None if resume is True else resume)
    return trainer.run()
