"""
Gaussian latent posteriors q(z) = N(μ, L Lᵀ + εI) with reparameterized
sampling, closed-form entropy and Cholesky-based log-density.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from src.backend.core.exceptions import ShapeMismatchError
from src.backend.services.autodiff import (
    Tape,
    Tensor,
    inv_quad,
    logdet_spd,
    matmul,
    repeat_rows,
    reshape,
    square,
)

logger = structlog.get_logger()

RIDGE = 1e-3
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentNoise:
    """Exogenous noise of the reparameterization z = μ + L u + √ε w"""
    u: np.ndarray
    w: np.ndarray

    @classmethod
    def draw(cls, count: int, dim: int, rng: np.random.Generator) -> "LatentNoise":
        return cls(u=rng.standard_normal((count, dim)), w=rng.standard_normal((count, dim)))

    @classmethod
    def zeros(cls, count: int, dim: int) -> "LatentNoise":
        return cls(u=np.zeros((count, dim)), w=np.zeros((count, dim)))


@dataclass(frozen=True)
class GaussianVariational:
    """Per-measurement posterior over the latent vector"""
    mu: Tensor
    l_factor: Tensor
    ridge: float = RIDGE

    def __post_init__(self):
        k = self.mu.shape[0] if self.mu.ndim == 1 else -1
        if k < 1 or self.l_factor.shape != (k, k):
            raise ShapeMismatchError("mu must be (k,) and l_factor (k, k)", shapes=[self.mu.shape, self.l_factor.shape])

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def covariance(self) -> Tensor:
        """Λ = L Lᵀ + εI"""
        return matmul(self.l_factor, self.l_factor.T) + Tensor(self.ridge * np.eye(self.dim))

    def watch(self, tape: Tape) -> "GaussianVariational":
        return GaussianVariational(tape.leaf(self.mu.data), tape.leaf(self.l_factor.data), self.ridge)

    def detached(self) -> "GaussianVariational":
        return GaussianVariational(Tensor(self.mu.data), Tensor(self.l_factor.data), self.ridge)

    @classmethod
    def from_arrays(cls, mu: np.ndarray, l_factor: np.ndarray, ridge: float = RIDGE) -> "GaussianVariational":
        return cls(Tensor(mu), Tensor(np.tril(l_factor)), ridge)


def init_variational(dim: int, rng: np.random.Generator) -> GaussianVariational:
    """μ ~ N(0, 0.1²), L = 0.1·I"""
    return GaussianVariational.from_arrays(0.1 * rng.standard_normal(dim), 0.1 * np.eye(dim))


def sample(q: GaussianVariational, n: int, rng: Optional[np.random.Generator] = None,
           noise: Optional[LatentNoise] = None) -> Tensor:
    """n reparameterized draws as rows of an (n, k) tensor"""
    if n < 1:
        raise ShapeMismatchError("sample count must be at least 1")
    noise = noise if noise is not None else LatentNoise.draw(n, q.dim, rng or np.random.default_rng())
    if noise.u.shape != (n, q.dim) or noise.w.shape != (n, q.dim):
        raise ShapeMismatchError("noise must be (n, k)", shapes=[noise.u.shape, noise.w.shape])
    mean = repeat_rows(reshape(q.mu, (1, q.dim)), n)
    return mean + matmul(noise.u, q.l_factor.T) + Tensor(np.sqrt(q.ridge) * noise.w)


def entropy(q: GaussianVariational) -> Tensor:
    """(k/2)·log(2πe) + ½·log det Λ"""
    return 0.5 * q.dim * (LOG_2PI + 1.0) + 0.5 * logdet_spd(q.covariance())


def log_prob(q: GaussianVariational, z: Tensor) -> Tensor:
    """Log-density of z (k,) or of each row of z (S, k)"""
    if z.shape[-1] != q.dim or z.ndim > 2:
        raise ShapeMismatchError(f"latent must end in {q.dim}", shapes=[z.shape])
    if z.ndim == 1:
        residual = z - q.mu
    else:
        residual = z - repeat_rows(reshape(q.mu, (1, q.dim)), z.shape[0])
    covariance = q.covariance()
    return -0.5 * inv_quad(covariance, residual) - 0.5 * logdet_spd(covariance) - 0.5 * q.dim * LOG_2PI


def std_normal_log_prob(z: Tensor) -> Tensor:
    """log N(z; 0, I) of z (k,) or of each row of z (S, k)"""
    k = z.shape[-1]
    return -0.5 * square(z).sum(axes=-1) - 0.5 * k * LOG_2PI


def lower_triangular(grad: np.ndarray) -> np.ndarray:
    """Project an L-gradient onto the lower-triangular parameterization"""
    return np.tril(grad)
