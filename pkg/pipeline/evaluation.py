"""
Held-out evaluation of trained models.

    iwelbo          importance-weighted bound with K particles and its delta-method stderr
    ate_estimate    model-based average treatment effect against the control dosage
    de_estimate     difference of library-normalized condition means in the data
    ate_pearson     Pearson r between ATE and DE across genes
    mask_f1         F1 between inferred and true masks under the best column permutation
    export_latents  masks.csv / embeddings.csv for a checkpoint
"""

import json
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from scipy.stats import pearsonr

from core.config import EvalConfig
from core.exceptions import EvaluationError
from core.ndcore import Tensor, no_grad
from pipeline.checkpoint import RestoredModel, load_model
from pipeline.data import PerturbDataset, library_normalize
from pipeline.inference import VariationalParams, particle_seeds, particle_terms, sample_globals
from pipeline.models import (COUNTS, GenerativeParams, LatentSample, compose_latent,
                             decode_likelihood, observation_mean, sample_observations,
                             spawn_streams)
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

REPORT_FILE = "eval_report.json"
MASK_THRESHOLD = 0.5


def _map(fn, items: Sequence, executor: Optional[Executor]) -> List:
    if executor is None or len(items) == 1:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


# =============================================================================
# IWELBO
# =============================================================================

@dataclass
class IwelboResult:
    value: float
    stderr: float
    K: int
    split: str = "test"

    def to_dict(self) -> Dict[str, Any]:
        return {"split": self.split, "K": self.K, "value": self.value, "stderr": self.stderr}


def log_weights(X: np.ndarray, X_enc: np.ndarray, D: np.ndarray, l: Optional[np.ndarray],
                vp: VariationalParams, gp: GenerativeParams, K: int, seed: int = 0,
                executor: Optional[Executor] = None) -> np.ndarray:
    """
    log w_k for K particles. Each particle draws the global latents once and
    shares them across every cell, so w_k is a dataset-level weight.
    """
    if K < 1:
        raise EvaluationError("IWELBO needs at least one particle", field="K", value=str(K))
    D = np.asarray(D, dtype=np.float64)

    def one_particle(particle_seed: int) -> float:
        with no_grad():
            return float(particle_terms(X, X_enc, D, l, vp, gp, particle_seed).total().item())

    return np.asarray(_map(one_particle, particle_seeds(seed, K), executor))


def iwelbo(X: np.ndarray, X_enc: np.ndarray, D: np.ndarray, l: Optional[np.ndarray],
           vp: VariationalParams, gp: GenerativeParams, K: int, seed: int = 0,
           executor: Optional[Executor] = None, split: str = "test") -> IwelboResult:
    """log (1/K) sum_k w_k, log-sum-exp stabilized."""
    log_w = log_weights(X, X_enc, D, l, vp, gp, K, seed, executor)
    value = float(logsumexp(log_w) - np.log(K))

    # delta method: se(log mean w) ~ sd(w) / (sqrt(K) mean(w))
    stderr = 0.0
    if K > 1:
        w = np.exp(log_w - log_w.max())
        stderr = float(w.std(ddof=1) / (np.sqrt(K) * w.mean()))
    return IwelboResult(value=value, stderr=stderr, K=K, split=split)


def relative_iwelbo(value: float, reference: float) -> float:
    """IWELBO relative to a reference model's IWELBO on the same split."""
    return float(value) - float(reference)


# =============================================================================
# TREATMENT EFFECTS
# =============================================================================

def _condition_mean(gp: GenerativeParams, latents: LatentSample, d: np.ndarray,
                    library: Optional[float], samples: int, seed: int) -> np.ndarray:
    D = np.asarray(d, dtype=np.float64).reshape(1, -1)
    l = None if library is None else np.array([library])
    dist = decode_likelihood(compose_latent(gp, latents, D), gp, l, D)
    if samples <= 0:
        return observation_mean(dist)[0]
    rng = np.random.default_rng(seed)
    return np.mean([sample_observations(dist, rng)[0] for _ in range(samples)], axis=0)


def _generation_library(gp: GenerativeParams) -> Optional[float]:
    if gp.likelihood != COUNTS:
        return None
    if gp.median_library is None:
        raise EvaluationError("Checkpoint has no median library size", field="median_library")
    return float(gp.median_library)


def ate_estimate(d_star: np.ndarray, d0: Optional[np.ndarray], vp: VariationalParams,
                 gp: GenerativeParams, K: int = 100, S: int = 0, seed: int = 0,
                 executor: Optional[Executor] = None) -> np.ndarray:
    """
    (1/K) sum_k [E(x | do(d*), z_b_k, M_k, E_k) - E(x | do(d0), z_b_k, M_k, E_k)]

    z_b_k comes from the prior and (E_k, M_k) from q. The inner expectation is
    the likelihood mean at the median train library (S = 0) or an average of
    S likelihood draws; both conditions reuse one observation seed per particle.
    """
    if d0 is None:
        raise EvaluationError("ATE needs a control dosage", field="--control",
                              suggestion="Name the control perturbation with --control")
    if K < 1:
        raise EvaluationError("ATE needs at least one particle", field="K", value=str(K))
    library = _generation_library(gp)

    def one_particle(particle_seed: int) -> np.ndarray:
        streams = spawn_streams(particle_seed)
        with no_grad():
            E, M, _ = sample_globals(vp, streams)
            Z_b = Tensor(streams["basal"].standard_normal((1, gp.latent_dim)))
            latents = LatentSample(Z_b=Z_b, E=E, M=M)
            obs_seed = int(streams["observations"].integers(2 ** 63))
            treated = _condition_mean(gp, latents, d_star, library, S, obs_seed)
            control = _condition_mean(gp, latents, d0, library, S, obs_seed)
        return treated - control

    effects = _map(one_particle, particle_seeds(seed, K), executor)
    total = np.zeros(gp.n_genes)
    for effect in effects:
        total = total + effect
    return total / K


def _matching_rows(D: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.flatnonzero((D == np.asarray(d)[None, :]).all(axis=1))


def condition_label(ds: PerturbDataset, d: np.ndarray) -> str:
    names = [ds.perturbation_names[i] for i in np.flatnonzero(d)]
    return "+".join(names) if names else "<none>"


def de_estimate(ds: PerturbDataset, d_star: np.ndarray, d0: np.ndarray,
                split: Optional[str] = None) -> np.ndarray:
    """Mean library-normalized expression of d* cells minus that of d0 cells."""
    X = library_normalize(ds)
    rows = np.arange(ds.n_cells) if split is None else ds.indices(split)
    D = ds.D[rows]

    groups = []
    for d in (d_star, d0):
        members = rows[_matching_rows(D, d)]
        if members.size == 0:
            raise EvaluationError(f"No cells for condition '{condition_label(ds, d)}'",
                                  field="condition", value=split or "all")
        groups.append(X[members].mean(axis=0))
    return groups[0] - groups[1]


def ate_pearson(ate: np.ndarray, de: np.ndarray) -> float:
    """Pearson r across gene features."""
    ate = np.asarray(ate, dtype=np.float64).ravel()
    de = np.asarray(de, dtype=np.float64).ravel()
    if ate.shape != de.shape or ate.size < 2:
        raise EvaluationError(f"Need two vectors of equal length >= 2, got {ate.size} and {de.size}",
                              field="ate_pearson")
    for name, values in (("ate", ate), ("de", de)):
        if np.all(values == values[0]):
            raise EvaluationError(f"Correlation is undefined: '{name}' is constant",
                                  field="ate_pearson", value=name)
    return float(pearsonr(ate, de)[0])


# =============================================================================
# MASKS
# =============================================================================

@dataclass
class MaskEstimate:
    probabilities: np.ndarray

    @property
    def binary(self) -> np.ndarray:
        return (np.asarray(self.probabilities) > MASK_THRESHOLD).astype(np.int64)

    @property
    def density(self) -> float:
        return float(self.binary.mean())


def best_column_permutation(inferred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """
    Column order of `inferred` maximizing true positives against `truth`;
    ties resolve by index order of the assignment solver.
    """
    overlap = truth.T.astype(np.float64) @ inferred.astype(np.float64)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return cols[np.argsort(rows)]


def mask_f1(inferred: Union[MaskEstimate, np.ndarray], truth: np.ndarray) -> float:
    """Global F1 over all T x D_z entries after the best column permutation."""
    if isinstance(inferred, MaskEstimate):
        binary = inferred.binary
    else:
        binary = (np.asarray(inferred, dtype=np.float64) > MASK_THRESHOLD).astype(np.int64)
    truth = (np.asarray(truth) > MASK_THRESHOLD).astype(np.int64)
    if binary.shape != truth.shape:
        raise EvaluationError(f"Mask shapes differ: {binary.shape} vs {truth.shape}",
                              field="mask_f1")

    permuted = binary[:, best_column_permutation(binary, truth)]
    tp = int((permuted & truth).sum())
    fp = int((permuted & (1 - truth)).sum())
    fn = int(((1 - permuted) & truth).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def load_true_masks(dataset_dir: Union[str, Path]) -> Optional[np.ndarray]:
    """true_masks.csv of a simulated dataset, if present."""
    path = Path(dataset_dir) / "true_masks.csv"
    if not path.is_file():
        return None
    frame = pd.read_csv(path, index_col=0, float_precision="round_trip")
    return frame.to_numpy(dtype=np.float64)


# =============================================================================
# EXPORT AND GENERATION
# =============================================================================

def _latent_frame(values: np.ndarray, names: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame(values, index=list(names),
                         columns=[f"z{i}" for i in range(values.shape[1])])
    frame.index.name = "perturbation"
    return frame


def export_latents(checkpoint: Union[str, Path, RestoredModel],
                   out_dir: Union[str, Path]) -> List[Path]:
    """Write masks.csv (p_t) and embeddings.csv (posterior means), one row per perturbation."""
    restored = checkpoint if isinstance(checkpoint, RestoredModel) else load_model(checkpoint)
    vp = restored.vp
    if vp.kind == "conditional":
        logger.warning("The conditional VAE has no masks or embeddings; nothing exported")
        return []

    names = restored.manifest.get("dataset", {}).get("perturbation_names") or \
        [f"p{t}" for t in range(vp.n_perturbations)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    with no_grad():
        tables = (("masks.csv", vp.mask_probabilities()), ("embeddings.csv", vp.embedding_means()))
        for filename, values in tables:
            path = out_dir / filename
            _latent_frame(values, names).to_csv(path, float_format="%.17g", lineterminator="\n")
            written.append(path)
    logger.info(f"Exported {vp.n_perturbations}x{vp.latent_dim} latents to {out_dir}")
    return written


def sample_predictive(d: np.ndarray, vp: VariationalParams, gp: GenerativeParams,
                      n_cells: int, seed: int = 0,
                      library_sizes: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Simulate `n_cells` cells under dosage `d`, which may be an unseen
    combination: z_b from the prior, one (E, M) draw from q.
    """
    streams = spawn_streams(seed)
    D = np.tile(np.asarray(d, dtype=np.float64), (n_cells, 1))
    with no_grad():
        E, M, _ = sample_globals(vp, streams)
        Z_b = Tensor(streams["basal"].standard_normal((n_cells, gp.latent_dim)))
        l = None
        if gp.likelihood == COUNTS:
            l = library_sizes if library_sizes is not None else \
                np.full(n_cells, _generation_library(gp))
        dist = decode_likelihood(compose_latent(gp, LatentSample(Z_b, E, M), D), gp, l, D)
        return sample_observations(dist, streams["observations"])


# =============================================================================
# REPORT
# =============================================================================

@dataclass
class EvalReport:
    iwelbo: IwelboResult
    ate: Dict[str, np.ndarray] = field(default_factory=dict)
    de: Dict[str, np.ndarray] = field(default_factory=dict)
    ate_pearson_pooled: Optional[float] = None
    ate_pearson_per_perturbation: Dict[str, Optional[float]] = field(default_factory=dict)
    mask_f1: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iwelbo": self.iwelbo.to_dict(),
            "ate_pearson": {"pooled": self.ate_pearson_pooled,
                            "per_perturbation": self.ate_pearson_per_perturbation},
            "mask_f1": self.mask_f1,
        }

    def write(self, out_dir: Union[str, Path], gene_names: Optional[Sequence[str]] = None) -> Path:
        """eval_report.json plus ate.csv / de.csv (conditions x genes) when computed."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / REPORT_FILE
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        for filename, table in (("ate.csv", self.ate), ("de.csv", self.de)):
            if table:
                frame = pd.DataFrame.from_dict(table, orient="index", columns=gene_names)
                frame.index.name = "condition"
                frame.to_csv(out_dir / filename, float_format="%.17g", lineterminator="\n")
        return path


def _check_compatible(ds: PerturbDataset, restored: RestoredModel) -> None:
    gp = restored.gp
    if (ds.n_genes, ds.n_perturbations) != (gp.n_genes, gp.n_perturbations):
        raise EvaluationError(
            f"Dataset has {ds.n_genes} genes / {ds.n_perturbations} perturbations, checkpoint "
            f"expects {gp.n_genes} / {gp.n_perturbations}", field="dataset")


def treatment_conditions(ds: PerturbDataset, split: str) -> List[np.ndarray]:
    """Distinct non-control, non-empty dosage patterns present in `split`."""
    rows = ds.D[ds.indices(split)]
    if rows.size == 0:
        return []
    control = ds.control_dosage()
    patterns = np.unique(rows, axis=0)
    return [p for p in patterns
            if p.any() and (control is None or not np.array_equal(p, control))]


def evaluate(checkpoint: Union[str, Path, RestoredModel], ds: PerturbDataset, cfg: EvalConfig,
             true_masks: Optional[np.ndarray] = None,
             executor: Optional[Executor] = None) -> EvalReport:
    """IWELBO on `cfg.split`, optional ATE-Pearson and, for simulated data, mask F1."""
    restored = checkpoint if isinstance(checkpoint, RestoredModel) else load_model(checkpoint)
    _check_compatible(ds, restored)
    gp, vp = restored.gp, restored.vp

    idx = ds.indices(cfg.split)
    if idx.size == 0:
        raise EvaluationError(f"Split '{cfg.split}' has no cells", field="eval_split",
                              value=cfg.split)
    l = None if ds.library_sizes is None else ds.library_sizes[idx]
    bound = iwelbo(ds.X[idx], restored.normalizer(ds.X[idx]), ds.D[idx], l, vp, gp, cfg.k,
                   seed=cfg.seed, executor=executor, split=cfg.split)
    logger.info(f"IWELBO ({cfg.split}, K={cfg.k}): {bound.value:.4f} +/- {bound.stderr:.4f}")
    report = EvalReport(iwelbo=bound)

    if cfg.ate:
        _add_treatment_effects(report, ds, vp, gp, cfg, executor)

    if true_masks is not None:
        probabilities = vp.mask_probabilities()
        if probabilities is None:
            logger.warning("Mask F1 is undefined for the conditional VAE")
        else:
            report.mask_f1 = mask_f1(MaskEstimate(probabilities), true_masks)
            logger.info(f"Mask F1: {report.mask_f1:.4f}")
    return report


def _add_treatment_effects(report: EvalReport, ds: PerturbDataset, vp: VariationalParams,
                           gp: GenerativeParams, cfg: EvalConfig,
                           executor: Optional[Executor]) -> None:
    d0 = ds.control_dosage()
    if d0 is None:
        raise EvaluationError("ATE needs a control perturbation", field="--control",
                              suggestion="Pass --control NAME or add '# control=NAME' to D.csv")

    pooled_ate, pooled_de = [], []
    for d_star in treatment_conditions(ds, cfg.split):
        label = condition_label(ds, d_star)
        ate = ate_estimate(d_star, d0, vp, gp, K=cfg.ate_particles, S=cfg.ate_samples,
                           seed=cfg.seed, executor=executor)
        de = de_estimate(ds, d_star, d0, split=cfg.split)
        report.ate[label], report.de[label] = ate, de
        pooled_ate.append(ate)
        pooled_de.append(de)
        try:
            report.ate_pearson_per_perturbation[label] = ate_pearson(ate, de)
        except EvaluationError as e:
            logger.warning(f"ATE-Pearson undefined for {label}: {e.args[0]}")
            report.ate_pearson_per_perturbation[label] = None

    if pooled_ate:
        report.ate_pearson_pooled = ate_pearson(np.concatenate(pooled_ate),
                                                np.concatenate(pooled_de))
        logger.info(f"ATE-Pearson (pooled over {len(pooled_ate)} conditions): "
                    f"{report.ate_pearson_pooled:.4f}")
    else:
        logger.warning(f"No treated conditions in split '{cfg.split}'")
