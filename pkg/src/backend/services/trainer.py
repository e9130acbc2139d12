"""
Joint trainer.
Maximizes the ELBO proxy averaged over a measurement set jointly in the
shared generator weights θ and every per-measurement posterior φ_i.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from src.backend.core.exceptions import (
    CholeskyError,
    DomainError,
    NonFiniteError,
    ObjectiveError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from src.backend.models.measurement_models import ForwardModel
from src.backend.models.training_models import TrainConfig, TrainRecord, TrainReport
from src.backend.services.autodiff import Tape, backward
from src.backend.services.deep_decoder import GeneratorMode, ImageGenerator
from src.backend.services.forward_operators import MeasurementSet
from src.backend.services.objective import elbo_proxy
from src.backend.services.optimizer import Adam, cosine_step_size
from src.backend.services.variational import (
    GaussianVariational,
    LatentNoise,
    init_variational,
    lower_triangular,
    sample,
)

logger = structlog.get_logger()

_BATCH_STREAM = 0xBA7C


@dataclass(frozen=True)
class TrainingState:
    """Everything needed to resume training at `iteration`"""
    iteration: int
    generator: ImageGenerator
    posteriors: List[GaussianVariational]
    optimizer_state: Dict[str, np.ndarray]


CheckpointFn = Callable[[TrainingState], None]


@dataclass(frozen=True)
class _IndexStep:
    index: int
    objective: float
    likelihood: float
    prior: float
    entropy: float
    theta_grads: Dict[str, np.ndarray]
    mu_grad: np.ndarray
    l_grad: np.ndarray


@dataclass(frozen=True)
class Reconstruction:
    """Posterior summary of one measurement"""
    mean: np.ndarray
    samples: np.ndarray
    std: np.ndarray


def step_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    """Per-(iteration, index) stream, independent of thread scheduling"""
    return np.random.default_rng([seed, iteration, index])


def _all_finite(arrays: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


class JointTrainer:
    """Adam ascent on the batched ELBO proxy over (θ, φ_1..φ_N)"""

    def __init__(self, config: TrainConfig, checkpoint: Optional[CheckpointFn] = None):
        self.config = config
        self.checkpoint = checkpoint
        self.theta_optimizer = Adam(lr=config.lr_generator)
        self.phi_optimizer = Adam(lr=config.lr_latent)

    def optimizer_state(self) -> Dict[str, np.ndarray]:
        state = {f"theta/{k}": v.copy() for k, v in self.theta_optimizer.state().items()}
        state.update({f"phi/{k}": v.copy() for k, v in self.phi_optimizer.state().items()})
        return state

    def load_optimizer_state(self, state: Dict[str, np.ndarray]) -> None:
        for owner, optimizer in (("theta", self.theta_optimizer), ("phi", self.phi_optimizer)):
            prefix = f"{owner}/"
            optimizer.load_state({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def _batch(self, iteration: int, count: int) -> List[int]:
        size = self.config.batch_size
        if size is None or size >= count:
            return list(range(count))
        rng = np.random.default_rng([self.config.seed, iteration, _BATCH_STREAM])
        return sorted(int(i) for i in rng.choice(count, size=size, replace=False))

    def _index_pass(self, generator: ImageGenerator, mu: np.ndarray, l_factor: np.ndarray,
                    model: ForwardModel, y: np.ndarray, iteration: int, index: int) -> _IndexStep:
        tape = Tape()
        watched = generator.watch(tape)
        q = GaussianVariational(tape.leaf(mu), tape.leaf(l_factor))
        mode = GeneratorMode.TRAIN if self.config.dropout else GeneratorMode.EVAL
        estimate = elbo_proxy(watched, q, model, y, self.config.mc_samples, mode,
                              step_rng(self.config.seed, iteration, index))
        grads = backward(estimate.value)
        return _IndexStep(
            index=index,
            objective=estimate.value.item(),
            likelihood=estimate.likelihood,
            prior=estimate.prior,
            entropy=estimate.entropy,
            theta_grads={name: np.array(grads.wrt(t)) for name, t in watched.named_tensors().items()},
            mu_grad=np.array(grads.wrt(q.mu)),
            l_grad=lower_triangular(grads.wrt(q.l_factor)),
        )

    def train(
        self,
        generator: ImageGenerator,
        posteriors: Sequence[GaussianVariational],
        measurements: MeasurementSet,
        start_iteration: int = 0,
    ) -> Tuple[ImageGenerator, List[GaussianVariational], TrainReport]:
        """
        Run iterations start_iteration..config.iterations-1.

        Returns:
            Updated generator, updated posteriors and the per-iteration report

        Raises:
            TrainingDivergedError: objective or parameters became non-finite;
                carries the last finite TrainingState
        """
        cfg = self.config
        count = len(measurements)
        if len(posteriors) != count:
            raise ShapeMismatchError("One posterior per measurement is required", shapes=[(len(posteriors),), (count,)])
        if start_iteration >= cfg.iterations:
            return generator, list(posteriors), TrainReport(records=[])

        theta = {name: t.data.copy() for name, t in generator.named_tensors().items()}
        phi: Dict[str, np.ndarray] = {}
        for i, q in enumerate(posteriors):
            phi[f"mu_{i}"] = q.mu.data.copy()
            phi[f"l_{i}"] = np.tril(q.l_factor.data)

        def snapshot() -> Tuple[ImageGenerator, List[GaussianVariational]]:
            return (
                generator.with_arrays({k: v.copy() for k, v in theta.items()}),
                [GaussianVariational.from_arrays(phi[f"mu_{i}"].copy(), phi[f"l_{i}"].copy()) for i in range(count)],
            )

        records: List[TrainRecord] = []
        started = time.perf_counter()
        logger.info("Joint training started", measurements=count, iterations=cfg.iterations,
                    start=start_iteration, threads=cfg.threads, samples=cfg.mc_samples)

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for iteration in range(start_iteration, cfg.iterations):
                last_good = TrainingState(iteration, *snapshot(), self.optimizer_state())
                current = last_good.generator
                batch = self._batch(iteration, count)

                def work(i: int) -> _IndexStep:
                    return self._index_pass(current, phi[f"mu_{i}"], phi[f"l_{i}"],
                                            measurements.model, measurements.observations[i], iteration, i)

                try:
                    if cfg.threads > 1:
                        steps = list(pool.map(work, batch))
                    else:
                        steps = [work(i) for i in batch]
                except (ObjectiveError, NonFiniteError, DomainError, CholeskyError) as e:
                    self._diverged(iteration, last_good, str(e))

                scale = 1.0 / len(batch)
                theta_grads = {name: np.zeros_like(value) for name, value in theta.items()}
                phi_grads: Dict[str, np.ndarray] = {}
                for s in steps:
                    for name, g in s.theta_grads.items():
                        theta_grads[name] += g
                    phi_grads[f"mu_{s.index}"] = scale * s.mu_grad
                    phi_grads[f"l_{s.index}"] = scale * s.l_grad
                for name in theta_grads:
                    theta_grads[name] = scale * theta_grads[name] - 2.0 * cfg.weight_decay * theta[name]

                lr_fraction = cosine_step_size(1.0, iteration, cfg.iterations, cfg.final_lr_fraction)
                if theta:
                    self.theta_optimizer.step(theta, theta_grads, lr=cfg.lr_generator * lr_fraction)
                self.phi_optimizer.step(phi, phi_grads, lr=cfg.lr_latent * lr_fraction)
                for s in steps:
                    phi[f"l_{s.index}"] = np.tril(phi[f"l_{s.index}"])

                if not _all_finite(list(theta.values()) + list(phi.values())):
                    self._diverged(iteration, last_good, "parameters became non-finite")

                record = TrainRecord(
                    iteration=iteration,
                    objective=float(np.mean([s.objective for s in steps])),
                    likelihood_term=float(np.mean([s.likelihood for s in steps])),
                    prior_term=float(np.mean([s.prior for s in steps])),
                    entropy_term=float(np.mean([s.entropy for s in steps])),
                    wall_clock=time.perf_counter() - started,
                )
                records.append(record)

                if cfg.log_every and iteration % cfg.log_every == 0:
                    logger.info("Training progress", iteration=iteration, objective=record.objective,
                                likelihood=record.likelihood_term, prior=record.prior_term,
                                entropy=record.entropy_term)
                if self.checkpoint and cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
                    self.checkpoint(TrainingState(iteration + 1, *snapshot(), self.optimizer_state()))

        final_generator, final_posteriors = snapshot()
        if self.checkpoint:
            self.checkpoint(TrainingState(cfg.iterations, final_generator, final_posteriors, self.optimizer_state()))
        logger.info("Joint training finished", iterations=len(records),
                    final_objective=records[-1].objective if records else None)
        return final_generator, final_posteriors, TrainReport(records=records)

    def _diverged(self, iteration: int, last_good: TrainingState, reason: str):
        logger.error("Training diverged", iteration=iteration, reason=reason)
        if self.checkpoint:
            self.checkpoint(last_good)
        raise TrainingDivergedError(f"Training diverged at iteration {iteration}: {reason}",
                                    iteration=iteration, last_good=last_good)


def joint_train(
    generator: ImageGenerator,
    posteriors: Sequence[GaussianVariational],
    measurements: MeasurementSet,
    config: TrainConfig,
    checkpoint: Optional[CheckpointFn] = None,
    resume: Optional[TrainingState] = None,
) -> Tuple[ImageGenerator, List[GaussianVariational], TrainReport]:
    """Functional entry point over JointTrainer; `resume` restarts from a saved state"""
    trainer = JointTrainer(config, checkpoint)
    if resume is None:
        return trainer.train(generator, posteriors, measurements)
    trainer.load_optimizer_state(resume.optimizer_state)
    return trainer.train(resume.generator, resume.posteriors, measurements, resume.iteration)


def init_posteriors(count: int, dim: int, seed: int) -> List[GaussianVariational]:
    """One freshly initialized posterior per measurement"""
    return [init_variational(dim, np.random.default_rng([seed, i])) for i in range(count)]


def fit_latent_posterior(
    generator: ImageGenerator,
    model: ForwardModel,
    y: np.ndarray,
    iterations: int,
    config: TrainConfig,
    seed: int,
) -> Tuple[GaussianVariational, List[float]]:
    """
    Fit q for one measurement with the generator held fixed in eval mode.

    Returns:
        Fitted posterior and the per-iteration objective trace
    """
    q = init_variational(generator.latent_dim, np.random.default_rng([seed, 0]))
    phi = {"mu": q.mu.data.copy(), "l": q.l_factor.data.copy()}
    optimizer = Adam(lr=config.lr_latent)
    trace: List[float] = []

    for iteration in range(iterations):
        tape = Tape()
        watched = GaussianVariational(tape.leaf(phi["mu"]), tape.leaf(phi["l"]))
        estimate = elbo_proxy(generator, watched, model, y, config.mc_samples,
                              GeneratorMode.EVAL, step_rng(seed, iteration, 0))
        grads = backward(estimate.value)
        optimizer.step(phi, {"mu": grads.wrt(watched.mu), "l": lower_triangular(grads.wrt(watched.l_factor))})
        phi["l"] = np.tril(phi["l"])
        trace.append(estimate.value.item())

    return GaussianVariational.from_arrays(phi["mu"], phi["l"]), trace


def reconstruct(
    generator: ImageGenerator,
    q: GaussianVariational,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[LatentNoise] = None,
) -> Reconstruction:
    """Posterior mean, samples and pixelwise std of G(z), z ~ q, in eval mode"""
    rng = rng if rng is not None else np.random.default_rng()
    z = sample(q.detached(), n_samples, rng=rng, noise=noise)
    images = np.stack([generator.generate(z[s], GeneratorMode.EVAL).data for s in range(n_samples)])
    std = images.std(axis=0, ddof=1) if n_samples > 1 else np.zeros(images.shape[1:])
    return Reconstruction(mean=images.mean(axis=0), samples=images, std=std)
