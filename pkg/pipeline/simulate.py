"""
Synthetic perturbation screens with a known sparse ground truth, and the
mask-recovery study run on them.

Ground truth per perturbation t: a binary mask m_t ~ Bern(mask_density) and
an embedding e_t ~ N(embedding_mean, embedding_var). Each cell receives one
perturbation, draws z_b ~ N(0, I) and is decoded by an orthogonally
initialized MLP; Gaussian noise is added with per-feature variance chosen so
the decoded signal carries (1 - noise_fraction) of each feature's variance.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.config import REGIMES, SPLITS, ModelConfig, RunConfig, SimConfig
from core.exceptions import SamsVaeError, StudyError, ValidationError
from core.ndcore import no_grad
from core.networks import orthogonal_init
from pipeline.checkpoint import load_model, save_checkpoint
from pipeline.data import GAUSSIAN, PerturbDataset, save_dataset
from pipeline.evaluation import MaskEstimate, mask_f1
from pipeline.models import GenerativeParams, spawn_streams
from pipeline.orchestrator import train
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

SIM_STREAMS = ("masks", "embeddings", "decoder", "pilot", "cells", "noise")
RECOVERY_COLUMNS = ("n_t", "regime", "alpha", "f1", "inferred_density", "seed")
MIN_ALPHA, MAX_ALPHA = 1e-300, 0.5


@dataclass(eq=False)
class SimTruth:
    masks: np.ndarray
    embeddings: np.ndarray
    decoder: GenerativeParams
    noise_variance: np.ndarray

    def signal(self, D: np.ndarray, Z_b: np.ndarray) -> np.ndarray:
        """Noise-free decoder output mu(z) for dosages D and basal states Z_b."""
        z = Z_b + np.asarray(D, dtype=np.float64) @ (self.embeddings * self.masks)
        with no_grad():
            return self.decoder.decoder(z).data


def _one_hot_rows(counts: np.ndarray, T: int) -> np.ndarray:
    labels = np.repeat(np.arange(T), counts)
    return np.eye(T)[labels]


def simulate_dataset(cfg: SimConfig) -> Tuple[PerturbDataset, SimTruth]:
    """
    Gaussian-mode dataset with samples_per_treatment training cells and
    val_samples_per_treatment cells in each of the val and test splits.
    """
    result = cfg.validate()
    if not result.is_valid:
        raise result.errors[0]

    T, Dz, Dx = cfg.perturbations, cfg.latent_dim, cfg.genes
    streams = spawn_streams(cfg.seed, SIM_STREAMS)

    masks = (streams["masks"].uniform(size=(T, Dz)) < cfg.mask_density).astype(np.float64)
    embeddings = cfg.embedding_mean + np.sqrt(cfg.embedding_var) * \
        streams["embeddings"].standard_normal((T, Dz))

    decoder_seed = int(streams["decoder"].integers(2 ** 63))
    gp = GenerativeParams(kind="sams", n_genes=Dx, n_perturbations=T, latent_dim=Dz,
                          alpha=cfg.mask_density, beta=cfg.embedding_var,
                          decoder_hidden=cfg.hidden, likelihood=GAUSSIAN, seed=decoder_seed)
    orthogonal_init(gp.decoder, decoder_seed)
    truth = SimTruth(masks=masks, embeddings=embeddings, decoder=gp,
                     noise_variance=np.zeros(Dx))

    # calibrate sigma^2 on pilot cells with uniformly drawn treatments
    pilot = streams["pilot"]
    pilot_D = np.eye(T)[pilot.integers(T, size=cfg.pilot_cells)]
    signal = truth.signal(pilot_D, pilot.standard_normal((cfg.pilot_cells, Dz)))
    ratio = cfg.noise_fraction / (1.0 - cfg.noise_fraction)
    truth.noise_variance = np.maximum(ratio * signal.var(axis=0), np.finfo(float).tiny)
    gp.log_scale.data = np.log(truth.noise_variance)

    per_split = {"train": cfg.samples_per_treatment, "val": cfg.val_samples_per_treatment,
                 "test": cfg.val_samples_per_treatment}
    blocks = [_one_hot_rows(np.full(T, per_split[s]), T) for s in SPLITS]
    D = np.concatenate(blocks)
    split = np.concatenate([np.full(len(b), s) for b, s in zip(blocks, SPLITS)]).astype("<U5")

    cells = streams["cells"].standard_normal((D.shape[0], Dz))
    X = truth.signal(D, cells) + np.sqrt(truth.noise_variance) * \
        streams["noise"].standard_normal((D.shape[0], Dx))

    perturbation_names = tuple(f"p{t}" for t in range(T))
    obs = pd.DataFrame({"perturbation": [perturbation_names[t] for t in D.argmax(axis=1)],
                        "split": split})
    ds = PerturbDataset(X=X, D=D, gene_names=tuple(f"g{j}" for j in range(Dx)),
                        perturbation_names=perturbation_names, split=split, mode=GAUSSIAN,
                        obs=obs)
    logger.info(f"Simulated {ds.n_cells} cells: T={T}, D_z={Dz}, D_x={Dx}, "
                f"mask density {masks.mean():.3f}, mean sigma^2 {truth.noise_variance.mean():.4f}")
    return ds, truth


def measure_signal_fraction(truth: SimTruth, n_cells: int = 10_000, seed: int = 0) -> np.ndarray:
    """Per-feature Var(mu(z)) / Var(x) over fresh cells."""
    rng = np.random.default_rng(seed)
    T, Dz = truth.masks.shape
    D = np.eye(T)[rng.integers(T, size=n_cells)]
    signal = truth.signal(D, rng.standard_normal((n_cells, Dz)))
    x = signal + np.sqrt(truth.noise_variance) * rng.standard_normal(signal.shape)
    return signal.var(axis=0) / x.var(axis=0)


def _truth_frame(values: np.ndarray, names) -> pd.DataFrame:
    frame = pd.DataFrame(values, index=list(names),
                         columns=[f"z{i}" for i in range(values.shape[1])])
    frame.index.name = "perturbation"
    return frame


def write_simulation(ds: PerturbDataset, truth: SimTruth, cfg: SimConfig,
                     out_dir: Union[str, Path]) -> Path:
    """Dataset CSVs plus true_masks.csv, true_embeddings.csv, sim_manifest.json and decoder.ckpt."""
    out_dir = save_dataset(ds, out_dir)
    names = ds.perturbation_names
    _truth_frame(truth.masks.astype(np.int64), names).to_csv(out_dir / "true_masks.csv",
                                                             lineterminator="\n")
    _truth_frame(truth.embeddings, names).to_csv(out_dir / "true_embeddings.csv",
                                                 float_format="%.17g", lineterminator="\n")

    manifest = {"config": {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(cfg).items()},
                "noise_variance": truth.noise_variance.tolist()}
    (out_dir / "sim_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2)
                                               + "\n", encoding="utf-8")
    save_checkpoint(out_dir / "decoder.ckpt",
                    {name: p.data for name, p in truth.decoder.named_parameters().items()},
                    {"generative": truth.decoder.manifest()})
    logger.success(f"Simulation written to {out_dir}")
    return out_dir


# =============================================================================
# RECOVERY STUDY
# =============================================================================

def fixed_sparsity_alpha(n_t: float) -> float:
    """alpha = 10^(-9 n_t / 50), clamped to [1e-300, 0.5]."""
    if n_t < 0:
        raise ValidationError("Samples per treatment cannot be negative", field="n_t",
                              value=str(n_t))
    alpha = 10.0 ** (-9.0 * n_t / 50.0)
    return min(max(alpha, MIN_ALPHA), MAX_ALPHA)


def regime_alpha(regime: str, n_t: int, fixed_alpha: float) -> float:
    if regime == "fixed-prior":
        return fixed_alpha
    if regime == "fixed-sparsity":
        return fixed_sparsity_alpha(n_t)
    raise ValidationError(f"Unknown regime '{regime}'", field="study_regimes", value=regime,
                          suggestion=f"Use: {', '.join(REGIMES)}")


def study_grid(config: RunConfig) -> List[Tuple[int, str, int]]:
    study = config.study
    return [(int(n_t), regime, int(seed))
            for seed, n_t, regime in product(study.seeds, study.samples, study.regimes)]


def cell_config(config: RunConfig, n_t: int, regime: str, seed: int) -> RunConfig:
    """Run configuration for one grid cell."""
    study = config.study
    model = ModelConfig(kind="sams", inference_mode=config.model.inference_mode,
                        latent_dim=config.sim.latent_dim,
                        alpha=regime_alpha(regime, n_t, study.alpha), beta=study.beta,
                        encoder_hidden=study.hidden, decoder_hidden=study.hidden,
                        embedding_hidden=config.model.embedding_hidden,
                        temperature=config.model.temperature, likelihood=GAUSSIAN)
    train = replace(config.train, seed=seed, steps=study.steps,
                    checkpoint_every=min(config.train.checkpoint_every, study.steps))
    return replace(config, model=model, train=train,
                   sim=replace(config.sim, samples_per_treatment=n_t, seed=seed))


def _run_cell(args: Tuple[RunConfig, int, str, int, str]) -> Dict[str, Any]:
    config, n_t, regime, seed, out_dir = args
    coords = {"n_t": n_t, "regime": regime, "seed": seed}
    try:
        cell = cell_config(config, n_t, regime, seed)
        ds, truth = simulate_dataset(cell.sim)
        run_dir = Path(out_dir) / f"n{n_t}_{regime}_s{seed}"
        result = train(ds, cell, run_dir)
        restored = load_model(result.best_checkpoint)
        estimate = MaskEstimate(restored.vp.mask_probabilities())
        return {**coords, "alpha": cell.model.alpha, "f1": mask_f1(estimate, truth.masks),
                "inferred_density": estimate.density}
    except SamsVaeError as e:
        return {**coords, "error": str(e)}


def summarize_recovery(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of F1 and inferred density per (n_t, regime)."""
    grouped = results.groupby(["n_t", "regime"], sort=True)
    summary = grouped.agg(f1_mean=("f1", "mean"), f1_std=("f1", "std"),
                          density_mean=("inferred_density", "mean"),
                          density_std=("inferred_density", "std"),
                          runs=("seed", "count"))
    return summary.reset_index()


def run_recovery_study(config: RunConfig, out_dir: Union[str, Path],
                       workers: Optional[int] = None) -> pd.DataFrame:
    """
    Train SAMS-VAE on every (n_t, regime, seed) cell of the grid; append the
    rows to recovery.csv and rewrite recovery_summary.csv from the full table.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = study_grid(config)
    workers = workers or config.study.workers
    logger.info(f"Recovery study: {len(grid)} grid cells, {workers} worker(s)")

    jobs = [(config, n_t, regime, seed, str(out_dir)) for n_t, regime, seed in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]

    failed = [row for row in rows if "error" in row]
    if failed:
        row = failed[0]
        raise StudyError(f"Grid cell failed: {row['error']}", field="grid",
                         value=f"n_t={row['n_t']}, regime={row['regime']}, seed={row['seed']}")

    results = pd.DataFrame(rows, columns=list(RECOVERY_COLUMNS))
    table_path = out_dir / "recovery.csv"
    if table_path.is_file():
        results = pd.concat([pd.read_csv(table_path), results], ignore_index=True)
    results.to_csv(table_path, index=False, lineterminator="\n")
    summarize_recovery(results).to_csv(out_dir / "recovery_summary.csv", index=False,
                                       lineterminator="\n")

    for row in rows:
        logger.info(f"n_t={row['n_t']:<4} {row['regime']:<15} seed={row['seed']}  "
                    f"F1={row['f1']:.3f}  density={row['inferred_density']:.3f}")
    logger.success(f"Recovery table written to {table_path}")
    return results
