"""
Probability distributions over ndcore tensors.

Distribution objects are immutable; sampling takes an explicit numpy
Generator (or an integer seed) so draws are reproducible and thread-safe.
`.log_prob` methods are elementwise; the module-level `*_log_prob`
functions sum over all elements.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from core.exceptions import DistributionError
from core.ndcore import (ArrayLike, Tensor, as_tensor, clip, lgamma, log, log1p, sigmoid,
                         softplus, straight_through)

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_EPS = 1e-6

SeedLike = Union[int, np.random.Generator, None]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# =============================================================================
# GAUSSIAN
# =============================================================================

@dataclass(frozen=True)
class DiagGaussian:
    """Independent normals with per-element mean and standard deviation."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        object.__setattr__(self, "std", as_tensor(self.std))

    @classmethod
    def from_variance(cls, mean: ArrayLike, variance: float) -> "DiagGaussian":
        mean = as_tensor(mean)
        return cls(mean, np.full(mean.shape, np.sqrt(variance)))

    def log_prob(self, x: Union[Tensor, ArrayLike]) -> Tensor:
        if np.any(self.std.data <= 0):
            raise DistributionError("Gaussian standard deviation must be positive",
                                    field="std", value=str(float(self.std.data.min())))
        z = (as_tensor(x) - self.mean) / self.std
        return -0.5 * LOG_2PI - log(self.std) - 0.5 * z * z

    def rsample(self, seed: SeedLike) -> Tensor:
        eps = as_generator(seed).standard_normal(self.mean.shape)
        return self.mean + self.std * eps


def gaussian_log_prob(x: Union[Tensor, ArrayLike], dist: DiagGaussian) -> Tensor:
    """Sum of univariate normal log-densities."""
    return dist.log_prob(x).sum()


def gaussian_rsample(dist: DiagGaussian, seed: SeedLike) -> Tensor:
    """mean + std * eps with eps ~ N(0, I); differentiable in mean and std."""
    return dist.rsample(seed)


def gaussian_log_density(x: Union[Tensor, ArrayLike], mean: Union[Tensor, ArrayLike],
                         variance: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise N(x; mean, variance) log-density."""
    variance = as_tensor(variance)
    if np.any(variance.data <= 0):
        raise DistributionError("Gaussian variance must be positive", field="variance",
                                value=str(float(variance.data.min())))
    diff = as_tensor(x) - mean
    return -0.5 * (LOG_2PI + log(variance) + diff * diff / variance)


def gaussian_likelihood_log_prob(x: Union[Tensor, ArrayLike], mean: Union[Tensor, ArrayLike],
                                 variance: Union[Tensor, ArrayLike]) -> Tensor:
    return gaussian_log_density(x, mean, variance).sum()


# =============================================================================
# BERNOULLI
# =============================================================================

@dataclass(frozen=True)
class RelaxedBernoulli:
    """Bernoulli parameterized by logits, sampled through a logistic relaxation."""

    logits: Tensor
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise DistributionError("Relaxation temperature must be positive",
                                    field="temperature", value=str(self.temperature))
        object.__setattr__(self, "logits", as_tensor(self.logits))

    @property
    def probs(self) -> Tensor:
        return sigmoid(self.logits)

    def log_prob(self, m: Union[Tensor, ArrayLike]) -> Tensor:
        """Elementwise m * logit - softplus(logit), stable for extreme logits."""
        return as_tensor(m) * self.logits - softplus(self.logits)

    def hard(self) -> np.ndarray:
        """Posterior-mode mask: probability > 0.5."""
        return (self.logits.data > 0).astype(np.float64)


def bernoulli_st_sample(dist: RelaxedBernoulli, seed: SeedLike) -> Tensor:
    """
    Hard {0, 1} draw whose gradient is that of sigmoid((logits + L) / tau),
    L being standard logistic noise.
    """
    rng = as_generator(seed)
    u = np.clip(rng.uniform(size=dist.logits.shape), np.finfo(float).tiny, 1.0 - 1e-16)
    noise = np.log(u) - np.log1p(-u)
    relaxed = sigmoid((dist.logits + noise) / dist.temperature)
    hard = (dist.logits.data + noise > 0).astype(np.float64)
    return straight_through(relaxed, hard)


def bernoulli_log_prob(m: Union[Tensor, ArrayLike], p: Union[Tensor, ArrayLike],
                       eps: float = PROB_EPS) -> Tensor:
    """Sum of m log p + (1 - m) log(1 - p) with p clamped to [eps, 1 - eps]."""
    m = as_tensor(m)
    p = clip(as_tensor(p), eps, 1.0 - eps)
    return (m * log(p) + (1.0 - m) * log1p(-p)).sum()


def bernoulli_log_prob_logits(m: Union[Tensor, ArrayLike], logits: Union[Tensor, ArrayLike]) -> Tensor:
    return RelaxedBernoulli(as_tensor(logits)).log_prob(m).sum()


def probability_logit(p: float, low: float = 1e-300, high: float = 1.0 - 1e-16) -> float:
    """Logit of a prior probability; keeps tiny probabilities such as 1e-36 exact."""
    p = min(max(float(p), low), high)
    return float(np.log(p) - np.log1p(-p))


# =============================================================================
# GAMMA-POISSON
# =============================================================================

@dataclass(frozen=True)
class GammaPoisson:
    """
    Negative binomial with mean `mean` and inverse dispersion `inv_dispersion`
    (variance mean + mean^2 / inv_dispersion).

    `log_mean` may carry log(mean) computed stably upstream (log-softmax plus
    log library size); it is derived from `mean` otherwise.
    """

    mean: Tensor
    inv_dispersion: Tensor
    log_mean: Optional[Tensor] = None

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        object.__setattr__(self, "inv_dispersion", as_tensor(self.inv_dispersion))
        if self.log_mean is not None:
            object.__setattr__(self, "log_mean", as_tensor(self.log_mean))
        if np.any(self.inv_dispersion.data <= 0):
            raise DistributionError("Inverse dispersion must be positive", field="theta_d")
        if np.any(self.mean.data < 0):
            raise DistributionError("Gamma-Poisson mean cannot be negative", field="mean")

    def log_prob(self, x: ArrayLike) -> Tensor:
        counts = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if np.any(counts < 0):
            row = np.argwhere(counts < 0)[0]
            raise DistributionError("Negative count passed to Gamma-Poisson log_prob",
                                    field="x", value=f"{counts[tuple(row)]} at {tuple(row)}")

        theta, mu = self.inv_dispersion, self.mean
        log_mu = self.log_mean if self.log_mean is not None else log(mu)
        log_theta_mu = log(theta + mu)
        return (lgamma(counts + theta) - lgamma(theta) - lgamma(counts + 1.0)
                - theta * log1p(mu / theta)
                + counts * (log_mu - log_theta_mu))

    def sample(self, seed: SeedLike) -> np.ndarray:
        """Direct negative-binomial draw."""
        theta = np.broadcast_to(self.inv_dispersion.data, self.mean.shape)
        mu = self.mean.data
        return as_generator(seed).negative_binomial(theta, theta / (theta + mu)).astype(np.float64)

    def sample_two_stage(self, seed: SeedLike) -> np.ndarray:
        """Gamma rate, then Poisson count; marginally identical to `sample`."""
        rng = as_generator(seed)
        theta = np.broadcast_to(self.inv_dispersion.data, self.mean.shape)
        rate = rng.gamma(shape=theta, scale=self.mean.data / theta)
        return rng.poisson(rate).astype(np.float64)


def gamma_poisson_log_prob(x: ArrayLike, dist: GammaPoisson) -> Tensor:
    """Negative-binomial log-pmf summed over all entries."""
    return dist.log_prob(x).sum()
