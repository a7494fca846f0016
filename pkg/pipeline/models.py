"""
Generative models: SAMS-VAE, CPA-VAE (masks fixed to one) and the
conditional VAE (dosage concatenated to the latent state).

A cell's latent state is its basal state plus the sum of the masked
embeddings of the perturbations it received:

    z_i = z_b_i + sum_t d_it (e_t * m_t)

The decoder maps z_i to a softmax over genes (counts) or to a Gaussian mean.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import MODEL_KINDS
from core.exceptions import ModelError, NonFiniteError
from core.ndcore import Parameter, Tensor, as_tensor, concat, exp, log, log_softmax, no_grad
from core.networks import ResidualMLP, build_residual_mlp
from core.stochastic import DiagGaussian, GammaPoisson, SeedLike, probability_logit
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)

COUNTS = "counts"
GAUSSIAN = "gaussian"

# Independent generator streams for E, M, Z_b and X
STREAMS = ("embeddings", "masks", "basal", "observations")


def spawn_streams(seed: SeedLike, names: Sequence[str] = STREAMS) -> Dict[str, np.random.Generator]:
    """One generator per latent group so ablations share draws under a seed."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 63))
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


@dataclass
class LatentSample:
    """One joint draw (Z_b, E, M); E and M are None for the conditional VAE."""

    Z_b: Tensor
    E: Optional[Tensor] = None
    M: Optional[Tensor] = None


class GenerativeParams:
    """Decoder network, likelihood parameters and prior hyperparameters."""

    def __init__(self, kind: str, n_genes: int, n_perturbations: int, latent_dim: int,
                 alpha: float = 0.1, beta: float = 1.0, decoder_hidden: Sequence[int] = (400, 400),
                 likelihood: str = COUNTS, seed: int = 0,
                 median_library: Optional[float] = None):
        if kind not in MODEL_KINDS:
            raise ModelError(f"Unknown model kind '{kind}'", field="model", value=kind,
                             suggestion=f"Use: {', '.join(MODEL_KINDS)}")
        if likelihood not in (COUNTS, GAUSSIAN):
            raise ModelError(f"Unknown likelihood '{likelihood}'", field="likelihood")
        if not 0.0 <= alpha <= 1.0 or beta <= 0:
            raise ModelError("Need alpha in [0, 1] and beta > 0", field="alpha",
                             value=f"alpha={alpha}, beta={beta}")

        self.kind = kind
        self.n_genes = int(n_genes)
        self.n_perturbations = int(n_perturbations)
        self.latent_dim = int(latent_dim)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.decoder_hidden = tuple(int(h) for h in decoder_hidden)
        self.likelihood = likelihood
        self.seed = int(seed)
        self.median_library = median_library

        in_dim = self.latent_dim + (self.n_perturbations if kind == "conditional" else 0)
        self.decoder: ResidualMLP = build_residual_mlp(in_dim, self.decoder_hidden, self.n_genes,
                                                       seed, name="decoder")
        # unconstrained: theta_d = exp(value), sigma^2 = exp(value)
        if likelihood == COUNTS:
            self.log_scale = Parameter(np.zeros(self.n_genes), name="theta_d")
        else:
            self.log_scale = Parameter(np.zeros(self.n_genes), name="log_sigma2")

    @property
    def has_masks(self) -> bool:
        return self.kind == "sams"

    @property
    def has_embeddings(self) -> bool:
        return self.kind != "conditional"

    def parameters(self) -> List[Parameter]:
        return [*self.decoder.parameters(), self.log_scale]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def manifest(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "n_genes": self.n_genes,
            "n_perturbations": self.n_perturbations,
            "latent_dim": self.latent_dim,
            "alpha": self.alpha,
            "beta": self.beta,
            "decoder_hidden": list(self.decoder_hidden),
            "likelihood": self.likelihood,
            "seed": self.seed,
            "median_library": self.median_library,
        }

    @classmethod
    def from_manifest(cls, manifest: Dict[str, Any]) -> "GenerativeParams":
        return cls(kind=manifest["kind"], n_genes=manifest["n_genes"],
                   n_perturbations=manifest["n_perturbations"],
                   latent_dim=manifest["latent_dim"], alpha=manifest["alpha"],
                   beta=manifest["beta"], decoder_hidden=manifest["decoder_hidden"],
                   likelihood=manifest["likelihood"], seed=manifest["seed"],
                   median_library=manifest.get("median_library"))

    def mask_prior_logit(self) -> float:
        return probability_logit(self.alpha)

    def embedding_prior(self, shape: Tuple[int, ...]) -> DiagGaussian:
        return DiagGaussian(np.zeros(shape), np.full(shape, np.sqrt(self.beta)))


# =============================================================================
# LATENT COMPOSITION
# =============================================================================

def perturbation_offset(D: Union[np.ndarray, Tensor], E: Union[Tensor, np.ndarray],
                        M: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
    """z^p = D @ (E * M); a single dosage row gives a (D_z,) vector."""
    D = as_tensor(D)
    single = D.ndim == 1
    if single:
        D = D.reshape(1, D.shape[0])
    effects = as_tensor(E) if M is None else as_tensor(E) * M
    offset = D @ effects
    return offset.reshape(offset.shape[1]) if single else offset


def decoder_input(gp: GenerativeParams, z: Tensor, D: Optional[np.ndarray] = None) -> Tensor:
    if gp.kind != "conditional":
        return z
    if D is None:
        raise ModelError("The conditional VAE decodes [z ; d] and needs the dosage matrix",
                         field="D")
    return concat([z, np.asarray(D, dtype=np.float64)], axis=1)


def compose_latent(gp: GenerativeParams, latents: LatentSample,
                   D: np.ndarray) -> Tensor:
    """Decoder-ready input for every cell in the batch."""
    if gp.kind == "conditional":
        return decoder_input(gp, latents.Z_b, D)
    M = latents.M if gp.kind == "sams" else None
    return latents.Z_b + perturbation_offset(D, latents.E, M)


def decode_likelihood(z: Tensor, gp: GenerativeParams, l: Optional[np.ndarray] = None,
                      D: Optional[np.ndarray] = None) -> Union[GammaPoisson, DiagGaussian]:
    """
    Observation distribution for latent states `z` (N, D_z).

    Counts mode: GammaPoisson(mean = softmax(f(z)) * l, theta_d). Gaussian
    mode: N(f(z), sigma^2 I), `l` ignored. For the conditional VAE `D` is
    concatenated to `z` before decoding.
    """
    if gp.kind == "conditional" and z.shape[1] == gp.latent_dim:
        z = decoder_input(gp, z, D)
    logits = gp.decoder(z)

    if gp.likelihood == GAUSSIAN:
        return DiagGaussian(logits, exp(0.5 * gp.log_scale))

    if l is None:
        raise ModelError("Library sizes are required in counts mode", field="l",
                         suggestion="Pass observed library sizes or the median train library")
    l = np.broadcast_to(np.asarray(l, dtype=np.float64).reshape(-1, 1), (logits.shape[0], 1))
    log_rho = log_softmax(logits, axis=1)
    return GammaPoisson(mean=exp(log_rho) * l, inv_dispersion=exp(gp.log_scale),
                        log_mean=log_rho + np.log(l))


def observation_mean(dist: Union[GammaPoisson, DiagGaussian]) -> np.ndarray:
    return dist.mean.data


def sample_observations(dist: Union[GammaPoisson, DiagGaussian], seed: SeedLike) -> np.ndarray:
    if isinstance(dist, GammaPoisson):
        return dist.sample(seed)
    return dist.rsample(seed).data


# =============================================================================
# GENERATIVE PROCESS
# =============================================================================

def sample_prior_globals(gp: GenerativeParams, streams: Dict[str, np.random.Generator]
                         ) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """E ~ N(0, beta I), M ~ Bern(alpha); M is all ones for CPA-VAE."""
    if not gp.has_embeddings:
        return None, None
    shape = (gp.n_perturbations, gp.latent_dim)
    E = Tensor(streams["embeddings"].standard_normal(shape) * np.sqrt(gp.beta))
    if gp.has_masks:
        M = Tensor((streams["masks"].uniform(size=shape) < gp.alpha).astype(np.float64))
    else:
        M = Tensor(np.ones(shape))
    return E, M


def sample_generative(gp: GenerativeParams, D: np.ndarray, seed: SeedLike,
                      library_sizes: Optional[np.ndarray] = None
                      ) -> Tuple[LatentSample, np.ndarray]:
    """Ancestral sampling of (Z_b, E, M) and observations X for dosage rows D."""
    D = np.asarray(D, dtype=np.float64)
    streams = spawn_streams(seed)

    with no_grad():
        E, M = sample_prior_globals(gp, streams)
        Z_b = Tensor(streams["basal"].standard_normal((D.shape[0], gp.latent_dim)))
        latents = LatentSample(Z_b=Z_b, E=E, M=M)

        l = None
        if gp.likelihood == COUNTS:
            if library_sizes is None:
                if gp.median_library is None:
                    raise ModelError("No library size for generation", field="median_library",
                                     suggestion="Fit the model on data or pass library_sizes")
                library_sizes = np.full(D.shape[0], gp.median_library)
            l = library_sizes
        dist = decode_likelihood(compose_latent(gp, latents, D), gp, l, D)
        X = sample_observations(dist, streams["observations"])
    return latents, X


# =============================================================================
# JOINT LOG-PROBABILITY
# =============================================================================

def _check_finite(term: str, value: Tensor) -> Tensor:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteError(term)
    return value


def global_prior_log_prob(latents: LatentSample, gp: GenerativeParams) -> Tensor:
    """Per-perturbation log p(e_t) + log p(m_t), shape (T,)."""
    if not gp.has_embeddings:
        return Tensor(np.zeros(gp.n_perturbations))

    embedding = _check_finite("log p(E)",
                              gp.embedding_prior(latents.E.shape).log_prob(latents.E).sum(axis=1))
    if not gp.has_masks:
        return embedding

    logit = gp.mask_prior_logit()
    mask = _check_finite("log p(M)",
                         (latents.M * logit - float(np.logaddexp(0.0, logit))).sum(axis=1))
    return embedding + mask


def basal_prior_log_prob(Z_b: Tensor) -> Tensor:
    """log N(z_b; 0, I) per cell."""
    return DiagGaussian(np.zeros(Z_b.shape), np.ones(Z_b.shape)).log_prob(Z_b).sum(axis=1)


def local_log_prob(X: np.ndarray, D: np.ndarray, latents: LatentSample, gp: GenerativeParams,
                   l: Optional[np.ndarray] = None) -> Tensor:
    """Per-cell log p(z_b_i) + log p(x_i | z_i), shape (N,)."""
    basal = _check_finite("log p(z_b)", basal_prior_log_prob(latents.Z_b))
    dist = decode_likelihood(compose_latent(gp, latents, D), gp, l, D)
    likelihood = _check_finite("log p(x | z)", dist.log_prob(X).sum(axis=1))
    return basal + likelihood


def log_joint(X: np.ndarray, D: np.ndarray, latents: LatentSample, gp: GenerativeParams,
              l: Optional[np.ndarray] = None) -> Tensor:
    """
    sum_t [log p(e_t) + log p(m_t)] + sum_i [log p(z_b_i) + log p(x_i | z_i)].

    CPA-VAE drops the mask term (M = 1); the conditional VAE has no global terms.
    Raises NonFiniteError naming the first non-finite term.
    """
    D = np.asarray(D, dtype=np.float64)
    if latents.Z_b.shape[0] != X.shape[0] or D.shape[0] != X.shape[0]:
        raise ModelError(f"Row mismatch: X {X.shape}, D {D.shape}, Z_b {latents.Z_b.shape}",
                         field="log_joint")
    total = global_prior_log_prob(latents, gp).sum() + local_log_prob(X, D, latents, gp, l).sum()
    return _check_finite("log_joint", total)
