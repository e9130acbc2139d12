"""
ELBO proxy estimator.
E_{z~q}[log p(y | G(z)) + log p(z) − log q(z)] by reparameterized
Monte-Carlo, plus the closed forms of the explicit Gaussian image model
used as an exact reference.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from src.backend.core.exceptions import DomainError, NonFiniteError, ObjectiveError, ShapeMismatchError
from src.backend.models.measurement_models import ForwardModel
from src.backend.services.autodiff import Tensor, square
from src.backend.services.deep_decoder import GeneratorMode, ImageGenerator
from src.backend.services.forward_operators import apply
from src.backend.services.variational import (
    LOG_2PI,
    GaussianVariational,
    LatentNoise,
    log_prob,
    sample,
    std_normal_log_prob,
)

logger = structlog.get_logger()


@dataclass(frozen=True)
class ElboEstimate:
    """Differentiable Monte-Carlo estimate with its per-term breakdown"""
    value: Tensor
    likelihood: float
    prior: float
    entropy: float
    per_sample: np.ndarray

    @property
    def terms(self) -> Dict[str, float]:
        return {"likelihood": self.likelihood, "prior": self.prior, "entropy": self.entropy}

    def standard_error(self) -> float:
        if len(self.per_sample) < 2:
            return float("nan")
        return float(np.std(self.per_sample, ddof=1) / np.sqrt(len(self.per_sample)))


def log_likelihood(model: ForwardModel, y: np.ndarray, x_hat: Tensor) -> Tensor:
    """−‖y − f(x̂)‖² / (2σ²) − (m/2)·log(2πσ²)"""
    y = np.asarray(y, dtype=np.float64)
    predicted = apply(model, x_hat)
    if predicted.shape != y.shape:
        raise ShapeMismatchError("Measurement and prediction shapes differ", shapes=[y.shape, predicted.shape])
    variance = model.sigma ** 2
    residual = Tensor(y) - predicted
    return -square(residual).sum() / (2.0 * variance) - 0.5 * y.size * (LOG_2PI + np.log(variance))


def elbo_proxy(
    generator: ImageGenerator,
    q: GaussianVariational,
    model: ForwardModel,
    y: np.ndarray,
    samples: int = 2,
    mode: GeneratorMode = GeneratorMode.TRAIN,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[LatentNoise] = None,
) -> ElboEstimate:
    """
    Monte-Carlo ELBO proxy of one measurement.

    Latent noise and dropout masks are drawn from the same rng so that all
    terms share common random numbers; pass `noise` to freeze the latents.
    """
    if samples < 1:
        raise ShapeMismatchError("ELBO proxy needs at least one sample")
    rng = rng if rng is not None else np.random.default_rng()
    noise = noise if noise is not None else LatentNoise.draw(samples, q.dim, rng)

    likelihoods: List[float] = []
    try:
        z = sample(q, samples, noise=noise)
        prior = std_normal_log_prob(z)
        posterior = log_prob(q, z)
        total = (prior - posterior).sum()
        for s in range(samples):
            term = log_likelihood(model, y, generator.generate(z[s], mode, rng))
            likelihoods.append(term.item())
            total = total + term
    except (NonFiniteError, DomainError) as e:
        partial = {"likelihood": float(np.mean(likelihoods)) if likelihoods else float("nan")}
        logger.error("Non-finite ELBO proxy", error=str(e), **partial)
        raise ObjectiveError("ELBO proxy estimate is not finite", terms=partial) from e

    per_sample = np.asarray(likelihoods) + prior.data.reshape(-1) - posterior.data.reshape(-1)
    return ElboEstimate(
        value=total / float(samples),
        likelihood=float(np.mean(likelihoods)),
        prior=float(np.mean(prior.data)),
        entropy=float(-np.mean(posterior.data)),
        per_sample=per_sample,
    )


def identity_log_evidence(y: np.ndarray, sigma: float) -> float:
    """log p(y) when x = z, z ~ N(0, I), y = x + N(0, σ²I)"""
    y = np.asarray(y, dtype=np.float64).ravel()
    total_variance = 1.0 + sigma ** 2
    return float(-0.5 * y @ y / total_variance - 0.5 * y.size * (LOG_2PI + np.log(total_variance)))


def identity_posterior(y: np.ndarray, sigma: float) -> Tuple[np.ndarray, float]:
    """Exact posterior mean and per-coordinate variance of the identity image model"""
    y = np.asarray(y, dtype=np.float64).ravel()
    shrink = 1.0 / (1.0 + sigma ** 2)
    return y * shrink, sigma ** 2 * shrink


def identity_elbo(q: GaussianVariational, y: np.ndarray, sigma: float) -> float:
    """Analytic ELBO of a Gaussian q under the identity image model"""
    y = np.asarray(y, dtype=np.float64).ravel()
    mu = q.mu.data
    covariance = q.covariance().data
    trace = float(np.trace(covariance))
    k = q.dim
    expected_likelihood = -(float((y - mu) @ (y - mu)) + trace) / (2.0 * sigma ** 2) \
        - 0.5 * y.size * (LOG_2PI + np.log(sigma ** 2))
    expected_prior = -0.5 * (float(mu @ mu) + trace) - 0.5 * k * LOG_2PI
    _, logdet = np.linalg.slogdet(covariance)
    entropy_value = 0.5 * k * (LOG_2PI + 1.0) + 0.5 * logdet
    return float(expected_likelihood + expected_prior + entropy_value)
