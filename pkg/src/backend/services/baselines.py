"""
Comparison reconstructions.
TV-regularized maximum likelihood solved by gradient descent with
backtracking, and a single-measurement Deep Decoder fit with a fixed
random latent (deep-image-prior style) that emits checkpoints.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import structlog

from src.backend.core.exceptions import (
    ConfigurationError,
    ForwardModelError,
    NumericalError,
    TrainingDivergedError,
)
from src.backend.models.generator_models import DeepDecoderConfig
from src.backend.models.measurement_models import ForwardModel
from src.backend.services.autodiff import Tape, Tensor, backward, matmul, sqrt, square
from src.backend.services.deep_decoder import GeneratorMode, GeneratorParams, init_generator
from src.backend.services.forward_operators import operator_for
from src.backend.services.metrics import psnr
from src.backend.services.objective import log_likelihood
from src.backend.services.optimizer import Adam

logger = structlog.get_logger()

TV_SMOOTHING = 1e-6
ARMIJO_FRACTION = 1e-4
MIN_STEP = 1e-14


@lru_cache(maxsize=16)
def difference_matrix(n: int) -> np.ndarray:
    """Forward differences with replicate boundary: last difference is zero"""
    matrix = np.zeros((n, n))
    for i in range(n - 1):
        matrix[i, i] = -1.0
        matrix[i, i + 1] = 1.0
    matrix.flags.writeable = False
    return matrix


def total_variation(x: Tensor, delta: float = TV_SMOOTHING) -> Tensor:
    """Isotropic smoothed TV: Σ √((∇ₕx)² + (∇ᵥx)² + δ²)"""
    height, width = x.shape
    horizontal = matmul(x, difference_matrix(width).T)
    vertical = matmul(difference_matrix(height), x)
    return sqrt(square(horizontal) + square(vertical) + delta ** 2).sum()


def tv_value(x: np.ndarray, delta: float = TV_SMOOTHING, net: bool = True) -> float:
    """TV of an image; with net=True the HW·δ floor is subtracted"""
    x = np.asarray(x, dtype=np.float64)
    value = total_variation(Tensor(x), delta).item()
    return value - x.size * delta if net else value


@dataclass
class TvRmlResult:
    image: np.ndarray
    objective_history: List[float] = field(default_factory=list)
    iterations: int = 0


def tv_rml(
    model: ForwardModel,
    y: np.ndarray,
    lam: float,
    iters: int = 500,
    step: float = 1.0,
    delta: float = TV_SMOOTHING,
    tolerance: float = 1e-12,
) -> TvRmlResult:
    """
    Minimize ‖y − f(x)‖² / (2σ²) + λ·TV_δ(x) from the adjoint (or mid-gray) start.

    The objective history is non-increasing: each step backtracks until the
    sufficient-decrease condition holds.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative", field_errors={"lam": str(lam)})
    operator = operator_for(model)
    x = operator.initial_image(y)

    def evaluate(image: np.ndarray, with_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
        tape = Tape()
        leaf = tape.leaf(image) if with_grad else Tensor(image)
        objective = -log_likelihood(model, y, leaf) + lam * total_variation(leaf, delta)
        if not with_grad:
            return objective.item(), None
        return objective.item(), np.array(backward(objective).wrt(leaf))

    current, grad = evaluate(x, True)
    history = [current]
    t = step
    iteration = 0
    for iteration in range(1, iters + 1):
        grad_norm2 = float(np.sum(grad * grad))
        if grad_norm2 <= tolerance:
            break
        while True:
            candidate = x - t * grad
            try:
                value, _ = evaluate(candidate, False)
            except NumericalError:
                value = np.inf
            if value <= current - ARMIJO_FRACTION * t * grad_norm2:
                break
            t *= 0.5
            if t < MIN_STEP:
                break
        if t < MIN_STEP:
            logger.info("TV-RML line search exhausted", iteration=iteration, objective=current)
            break
        x = candidate
        current, grad = evaluate(x, True)
        if not np.isfinite(current):
            raise TrainingDivergedError("TV-RML objective is not finite", iteration=iteration, last_good=x)
        history.append(current)
        t = min(step, 2.0 * t)

    logger.info("TV-RML finished", lam=lam, iterations=iteration, objective=history[-1])
    return TvRmlResult(image=x, objective_history=history, iterations=iteration)


@dataclass
class DipResult:
    """Checkpointed images of one single-measurement fit"""
    checkpoints: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    log_likelihoods: List[float] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.checkpoints[-1][1]

    def psnr_trace(self, reference: np.ndarray) -> List[Tuple[int, float]]:
        return [(iteration, psnr(image, reference)) for iteration, image in self.checkpoints]

    def best_checkpoint(self, reference: np.ndarray) -> Tuple[int, float]:
        """Oracle early-stopping point"""
        return max(self.psnr_trace(reference), key=lambda pair: pair[1])


def dip_fit(
    model: ForwardModel,
    y: np.ndarray,
    config: DeepDecoderConfig,
    iters: int,
    checkpoint_interval: int = 50,
    lr: float = 1e-2,
    seed: int = 0,
) -> DipResult:
    """Fit a fresh Deep Decoder with a fixed random latent to one measurement by maximum likelihood"""
    if tuple(config.output_size) != tuple(model.geometry) or config.output_channels != 1:
        raise ForwardModelError("Generator output does not match the measurement geometry", kind=model.kind.value)
    if checkpoint_interval < 1:
        raise ConfigurationError("checkpoint interval must be at least 1",
                                 field_errors={"checkpoint_interval": str(checkpoint_interval)})

    params: GeneratorParams = init_generator(config, seed)
    z = Tensor(np.random.default_rng([seed, 1]).standard_normal(config.latent_dim))
    theta = {name: array.copy() for name, array in params.arrays().items()}
    optimizer = Adam(lr=lr)
    result = DipResult()

    for iteration in range(iters):
        tape = Tape()
        watched = params.with_arrays(theta).watch(tape)
        try:
            objective = log_likelihood(model, y, watched.generate(z, GeneratorMode.EVAL))
        except NumericalError as e:
            raise TrainingDivergedError(f"DIP fit diverged: {e.message}", iteration=iteration,
                                        last_good=result.checkpoints[-1][1] if result.checkpoints else None) from e
        grads = backward(objective)
        optimizer.step(theta, {name: grads.wrt(t) for name, t in watched.named_tensors().items()})
        result.log_likelihoods.append(objective.item())

        if (iteration + 1) % checkpoint_interval == 0:
            image = params.with_arrays(theta).generate(z, GeneratorMode.EVAL).data
            result.checkpoints.append((iteration + 1, image))

    logger.info("DIP fit finished", iterations=iters, checkpoints=len(result.checkpoints))
    return result
