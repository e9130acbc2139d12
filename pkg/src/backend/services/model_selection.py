"""
Model selection by the ELBO proxy.
Each candidate generator is frozen, a latent posterior is fitted per case,
and the negated ELBO proxy of that fit is the candidate's score.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from src.backend.core.exceptions import ConfigurationError
from src.backend.models.measurement_models import ForwardModel
from src.backend.models.training_models import TrainConfig
from src.backend.services.deep_decoder import GeneratorMode, ImageGenerator
from src.backend.services.metrics import ScoreMatrix
from src.backend.services.objective import elbo_proxy
from src.backend.services.trainer import fit_latent_posterior
from src.backend.services.variational import GaussianVariational

logger = structlog.get_logger()

Case = Tuple[ForwardModel, np.ndarray]

_EVAL_STREAM = 0xE7A1


def score_candidate(
    candidate: ImageGenerator,
    model: ForwardModel,
    y: np.ndarray,
    fit_iters: int,
    config: TrainConfig,
    seed: int,
    eval_samples: int,
    eval_rng: np.random.Generator,
) -> Tuple[float, GaussianVariational]:
    """−ELBO proxy of the fitted posterior, evaluated in eval mode"""
    q, _ = fit_latent_posterior(candidate, model, y, fit_iters, config, seed)
    estimate = elbo_proxy(candidate, q, model, y, eval_samples, GeneratorMode.EVAL, eval_rng)
    return -estimate.value.item(), q


def model_selection(
    candidates: Sequence[ImageGenerator],
    cases: Sequence[Case],
    fit_iters: int,
    config: Optional[TrainConfig] = None,
    eval_samples: int = 64,
    seed: int = 0,
    candidate_labels: Optional[List[str]] = None,
    case_labels: Optional[List[str]] = None,
    threads: int = 1,
) -> ScoreMatrix:
    """
    Score every (case, candidate) cell.

    Cells are independent and seeded from (seed, case, candidate), so the
    matrix does not depend on the thread count.
    """
    if len(candidates) < 2:
        raise ConfigurationError("model selection needs at least two candidates",
                                 field_errors={"candidates": str(len(candidates))})
    if not cases:
        raise ConfigurationError("model selection needs at least one case")
    config = config or TrainConfig()

    cells = [(i, j) for i in range(len(cases)) for j in range(len(candidates))]

    def score(cell: Tuple[int, int]) -> float:
        i, j = cell
        model, y = cases[i]
        value, _ = score_candidate(
            candidates[j], model, y, fit_iters, config,
            seed=int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0]),
            eval_samples=eval_samples,
            eval_rng=np.random.default_rng([seed, i, j, _EVAL_STREAM]),
        )
        return value

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(score, cells))
    else:
        values = [score(cell) for cell in cells]

    scores = np.asarray(values).reshape(len(cases), len(candidates))
    matrix = ScoreMatrix(scores, case_labels or [], candidate_labels or [])
    logger.info("Model selection finished", cases=len(cases), candidates=len(candidates),
                selected=matrix.selected_labels())
    return matrix
