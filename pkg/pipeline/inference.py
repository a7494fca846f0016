"""
Variational families, the minibatch-reweighted ELBO and the AdamW update.

Families (ordered sampling M -> E -> Z_b):

    mean-field   q(m_t) q(e_t) q(z_b | x)
    corr-e       q(m_t) q(e_t | m_t) q(z_b | x)
    corr-z       q(m_t) q(e_t) q(z_b | x, z^p)
    corr-both    q(m_t) q(e_t | m_t) q(z_b | x, z^p)

The conditional VAE has only the local factor q(z_b | x, d).
"""

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import INFERENCE_MODES, normalize_mode
from core.exceptions import ModelError, NonFiniteError
from core.ndcore import Parameter, Tensor, as_tensor, concat, softplus
from core.networks import ResidualMLP, build_residual_mlp
from core.stochastic import (DiagGaussian, RelaxedBernoulli, SeedLike, bernoulli_st_sample)
from pipeline.models import (GenerativeParams, LatentSample, decode_likelihood, compose_latent,
                             global_prior_log_prob, basal_prior_log_prob, perturbation_offset,
                             spawn_streams)
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

POSTERIOR_STREAMS = ("embeddings", "masks", "basal")
EMBEDDING_STD_INIT = 0.1


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def particle_seeds(seed: Union[int, Sequence[int]], count: int) -> List[int]:
    """Independent integer seeds, one per particle, fixed by `seed`."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
            >> np.uint64(1)]


# =============================================================================
# VARIATIONAL FAMILY
# =============================================================================

class VariationalParams:
    """
    Mask logits, embedding posterior and amortized basal encoder.

    Parameter names: q.mask_logits, q.embedding_mean, q.embedding_scale,
    q.embedding_net.*, q.encoder.*
    """

    def __init__(self, kind: str, mode: str, n_genes: int, n_perturbations: int,
                 latent_dim: int, encoder_hidden: Sequence[int] = (400, 400),
                 embedding_hidden: Sequence[int] = (100,), temperature: float = 1.0,
                 seed: int = 0):
        mode = normalize_mode(mode)
        if mode not in INFERENCE_MODES:
            raise ModelError(f"Unknown inference mode '{mode}'", field="inference_mode",
                             suggestion=f"Use: {', '.join(INFERENCE_MODES)}")
        if kind == "conditional" and mode != "mean-field":
            raise ModelError("The conditional VAE only supports mean-field inference",
                             field="inference_mode", value=mode)

        self.kind = kind
        self.mode = mode
        self.n_genes = int(n_genes)
        self.n_perturbations = int(n_perturbations)
        self.latent_dim = int(latent_dim)
        self.encoder_hidden = tuple(int(h) for h in encoder_hidden)
        self.embedding_hidden = tuple(int(h) for h in embedding_hidden)
        self.temperature = float(temperature)
        self.seed = int(seed)

        encoder_seed, embedding_seed, init_seed = particle_seeds(seed, 3)
        rng = np.random.default_rng(init_seed)
        T, Dz = self.n_perturbations, self.latent_dim

        self.mask_logits: Optional[Parameter] = None
        self.embedding_mean: Optional[Parameter] = None
        self.embedding_scale: Optional[Parameter] = None
        self.embedding_net: Optional[ResidualMLP] = None

        if kind == "sams":
            self.mask_logits = Parameter(np.zeros((T, Dz)), name="q.mask_logits")
        if kind != "conditional":
            if self.correlated_embeddings:
                self.embedding_net = build_residual_mlp(Dz + T, self.embedding_hidden, 2 * Dz,
                                                        embedding_seed, name="q.embedding_net")
            else:
                self.embedding_mean = Parameter(rng.normal(0.0, EMBEDDING_STD_INIT, (T, Dz)),
                                                name="q.embedding_mean")
                self.embedding_scale = Parameter(
                    np.full((T, Dz), inverse_softplus(EMBEDDING_STD_INIT)),
                    name="q.embedding_scale")

        encoder_in = self.n_genes
        if self.correlated_basal:
            encoder_in += Dz
        if kind == "conditional":
            encoder_in += T
        self.encoder = build_residual_mlp(encoder_in, self.encoder_hidden, 2 * Dz, encoder_seed,
                                          name="q.encoder")

    @property
    def correlated_embeddings(self) -> bool:
        return self.mode in ("corr-e", "corr-both")

    @property
    def correlated_basal(self) -> bool:
        return self.mode in ("corr-z", "corr-both")

    def parameters(self) -> List[Parameter]:
        params = [p for p in (self.mask_logits, self.embedding_mean, self.embedding_scale)
                  if p is not None]
        if self.embedding_net is not None:
            params.extend(self.embedding_net.parameters())
        params.extend(self.encoder.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def manifest(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "n_genes": self.n_genes,
            "n_perturbations": self.n_perturbations,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "embedding_hidden": list(self.embedding_hidden),
            "temperature": self.temperature,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, manifest: Mapping[str, object]) -> "VariationalParams":
        return cls(**{key: manifest[key] for key in (
            "kind", "mode", "n_genes", "n_perturbations", "latent_dim", "encoder_hidden",
            "embedding_hidden", "temperature", "seed")})

    # analysis ------------------------------------------------------------------

    def mask_probabilities(self) -> Optional[np.ndarray]:
        """p_t per latent dimension; all ones for CPA-VAE, None for the conditional VAE."""
        if self.kind == "conditional":
            return None
        if self.mask_logits is None:
            return np.ones((self.n_perturbations, self.latent_dim))
        return RelaxedBernoulli(self.mask_logits.data).probs.data

    def hard_masks(self) -> Optional[np.ndarray]:
        probs = self.mask_probabilities()
        return None if probs is None else (probs > 0.5).astype(np.float64)

    def embedding_means(self, masks: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
        """Posterior embedding means; correlated families condition on `masks` (default: hard masks)."""
        if self.kind == "conditional":
            return None
        if not self.correlated_embeddings:
            return self.embedding_mean.data.copy()
        masks = self.hard_masks() if masks is None else masks
        return self._embedding_posterior(Tensor(masks)).mean.data

    # factors -------------------------------------------------------------------

    def _embedding_posterior(self, M: Tensor) -> DiagGaussian:
        Dz = self.latent_dim
        if self.correlated_embeddings:
            out = self.embedding_net(concat([M, np.eye(self.n_perturbations)], axis=1))
            return DiagGaussian(out[:, :Dz], softplus(out[:, Dz:]))
        return DiagGaussian(self.embedding_mean, softplus(self.embedding_scale))

    def basal_posterior(self, X_enc: np.ndarray, D: np.ndarray, E: Optional[Tensor] = None,
                        M: Optional[Tensor] = None) -> DiagGaussian:
        """q(z_b | x, ...) for a batch of encoder-normalized rows."""
        Dz = self.latent_dim
        inputs = as_tensor(X_enc)
        if self.correlated_basal:
            M_eff = M if self.kind == "sams" else None
            inputs = concat([inputs, perturbation_offset(D, E, M_eff)], axis=1)
        elif self.kind == "conditional":
            inputs = concat([inputs, np.asarray(D, dtype=np.float64)], axis=1)
        out = self.encoder(inputs)
        return DiagGaussian(out[:, :Dz], softplus(out[:, Dz:]))


@dataclass
class PosteriorSample:
    """A draw from q with per-perturbation and per-cell log q."""

    latents: LatentSample
    log_q_global: Tensor
    log_q_local: Tensor

    @property
    def log_q(self) -> Tensor:
        return self.log_q_global.sum() + self.log_q_local.sum()


def sample_globals(vp: VariationalParams, streams: Dict[str, np.random.Generator],
                   hard_masks: bool = False) -> Tuple[Optional[Tensor], Optional[Tensor], Tensor]:
    """M then E | M. Returns (E, M, log q per perturbation)."""
    T, Dz = vp.n_perturbations, vp.latent_dim
    if vp.kind == "conditional":
        return None, None, Tensor(np.zeros(T))

    if vp.kind == "sams":
        mask_dist = RelaxedBernoulli(vp.mask_logits, vp.temperature)
        if hard_masks:
            M = Tensor(mask_dist.hard())
        else:
            M = bernoulli_st_sample(mask_dist, streams["masks"])
        log_q_mask = mask_dist.log_prob(M).sum(axis=1)
    else:
        M = Tensor(np.ones((T, Dz)))
        log_q_mask = None

    embedding_dist = vp._embedding_posterior(M)
    E = embedding_dist.rsample(streams["embeddings"])
    log_q = embedding_dist.log_prob(E).sum(axis=1)
    if log_q_mask is not None:
        log_q = log_q + log_q_mask
    return E, M, log_q


def sample_posterior(X_enc: np.ndarray, D: np.ndarray, vp: VariationalParams, seed: SeedLike,
                     hard_masks: bool = False) -> PosteriorSample:
    """
    Ordered draw M -> E -> Z_b with its log q. Masks use the straight-through
    estimator unless `hard_masks`, which takes the posterior mode p > 0.5.
    """
    streams = spawn_streams(seed, POSTERIOR_STREAMS)
    E, M, log_q_global = sample_globals(vp, streams, hard_masks=hard_masks)

    basal = vp.basal_posterior(X_enc, D, E, M)
    Z_b = basal.rsample(streams["basal"])
    log_q_local = basal.log_prob(Z_b).sum(axis=1)
    return PosteriorSample(LatentSample(Z_b=Z_b, E=E, M=M), log_q_global, log_q_local)


# =============================================================================
# OBJECTIVES
# =============================================================================

@dataclass
class ParticleTerms:
    """
    log-ratio terms of one particle:
    global_log_ratio[t] = log p(e_t) + log p(m_t) - log q(m_t) - log q(e_t | m_t)
    local_log_ratio[i]  = log p(x_i | z_i) + log p(z_b_i) - log q(z_b_i | ...)
    """

    global_log_ratio: Tensor
    local_log_ratio: Tensor

    def subset(self, idx: np.ndarray) -> "ParticleTerms":
        return ParticleTerms(self.global_log_ratio, self.local_log_ratio[np.asarray(idx)])

    def total(self) -> Tensor:
        return self.global_log_ratio.sum() + self.local_log_ratio.sum()


def particle_terms(X: np.ndarray, X_enc: np.ndarray, D: np.ndarray, l: Optional[np.ndarray],
                   vp: VariationalParams, gp: GenerativeParams, seed: SeedLike,
                   hard_masks: bool = False) -> ParticleTerms:
    D = np.asarray(D, dtype=np.float64)
    sample = sample_posterior(X_enc, D, vp, seed, hard_masks=hard_masks)
    latents = sample.latents

    global_ratio = global_prior_log_prob(latents, gp) - sample.log_q_global
    dist = decode_likelihood(compose_latent(gp, latents, D), gp, l, D)
    local_ratio = (dist.log_prob(X).sum(axis=1) + basal_prior_log_prob(latents.Z_b)
                   - sample.log_q_local)

    for term, value in (("global log-ratio", global_ratio), ("local log-ratio", local_ratio)):
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError(term)
    return ParticleTerms(global_ratio, local_ratio)


def reweighting(D_batch: np.ndarray, n_t: np.ndarray) -> np.ndarray:
    """n~_t / n_t; zero for perturbations absent from the batch."""
    batch_counts = np.asarray(D_batch, dtype=np.float64).sum(axis=0)
    n_t = np.asarray(n_t, dtype=np.float64)
    orphan = (batch_counts > 0) & (n_t <= 0)
    if orphan.any():
        t = int(np.argmax(orphan))
        raise ModelError(f"Batch contains perturbation {t} with no training cells (n_t = 0)",
                         field="n_t", value=str(t),
                         suggestion="Recompute n_t on the train split or fix the split")
    return np.divide(batch_counts, n_t, out=np.zeros_like(batch_counts), where=n_t > 0)


def reweighted_objective(terms: ParticleTerms, D_batch: np.ndarray, n_t: np.ndarray) -> Tensor:
    """sum_t (n~_t / n_t) G_t + sum_{i in batch} L_i"""
    weights = reweighting(D_batch, n_t)
    return (terms.global_log_ratio * weights).sum() + terms.local_log_ratio.sum()


def _map_particles(fn, seeds: Sequence[int], executor: Optional[Executor]) -> List:
    if executor is None or len(seeds) == 1:
        return [fn(s) for s in seeds]
    return list(executor.map(fn, seeds))


def elbo_minibatch(batch: np.ndarray, X: np.ndarray, X_enc: np.ndarray, D: np.ndarray,
                   l: Optional[np.ndarray], vp: VariationalParams, gp: GenerativeParams,
                   n_t: np.ndarray, particles: int = 1, seed: int = 0,
                   executor: Optional[Executor] = None) -> Tensor:
    """
    Minibatch ELBO estimate averaged over `particles`, to be maximized.
    Its expectation over uniformly drawn batches is (|B| / N) * ELBO.
    Particles may fan out to `executor`; the sum is taken in particle order.
    """
    if particles < 1:
        raise ModelError("Need at least one particle", field="particles", value=str(particles))
    batch = np.asarray(batch)
    X_b, X_enc_b, D_b = X[batch], X_enc[batch], D[batch]
    l_b = None if l is None else l[batch]
    weights = reweighting(D_b, n_t)

    def one_particle(particle_seed: int) -> Tensor:
        terms = particle_terms(X_b, X_enc_b, D_b, l_b, vp, gp, particle_seed)
        return (terms.global_log_ratio * weights).sum() + terms.local_log_ratio.sum()

    estimates = _map_particles(one_particle, particle_seeds(seed, particles), executor)
    total = estimates[0]
    for value in estimates[1:]:
        total = total + value
    return total / float(particles)


def elbo(X: np.ndarray, X_enc: np.ndarray, D: np.ndarray, l: Optional[np.ndarray],
         vp: VariationalParams, gp: GenerativeParams, particles: int = 1, seed: int = 0,
         executor: Optional[Executor] = None) -> Tensor:
    """ELBO of the given rows with every global term at full weight (validation)."""
    if X.shape[0] == 0:
        return Tensor(0.0)
    D = np.asarray(D, dtype=np.float64)

    def one_particle(particle_seed: int) -> Tensor:
        return particle_terms(X, X_enc, D, l, vp, gp, particle_seed).total()

    estimates = _map_particles(one_particle, particle_seeds(seed, particles), executor)
    total = estimates[0]
    for value in estimates[1:]:
        total = total + value
    return total / float(particles)


# =============================================================================
# OPTIMIZER
# =============================================================================

@dataclass
class AdamState:
    """Moments keyed by parameter name."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Mapping[Parameter, np.ndarray],
              state: AdamState, lr: float, wd: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """
    One AdamW update in place. Weight decay is decoupled, p <- p (1 - lr wd),
    and only applies to parameters flagged `decay` (network weights).
    Parameters without a gradient see a zero gradient.
    """
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(p.name, np.zeros_like(p.data))
        v = state.v.get(p.name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v

        updated = p.data
        if p.decay and wd:
            updated = updated * (1.0 - lr * wd)
        p.data = updated - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


class AdamW:
    """Stateful wrapper around `adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, weight_decay: float = 1e-6,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ModelError("Parameter names must be unique", field="parameters")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()
        logger.debug(f"AdamW over {len(self.params)} tensors: lr={lr}, weight_decay={weight_decay}")

    def step(self, grads: Mapping[Parameter, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m.{k}": v for k, v in self.state.m.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.state.v.items()})
        return arrays

    def load_state_arrays(self, step: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.state = AdamState(step=int(step))
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                self.state.m[key[len("adam.m."):]] = np.asarray(value)
            elif key.startswith("adam.v."):
                self.state.v[key[len("adam.v."):]] = np.asarray(value)
