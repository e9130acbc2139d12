"""
Image quality metrics: PSNR, ambiguity-registered PSNR for phase
retrieval, and the model-selection score matrix.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, List, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from src.backend.core.exceptions import ConfigurationError, NonFiniteError, ShapeMismatchError
from src.backend.services.autodiff import Tensor

logger = structlog.get_logger()

PSNR_INFINITE = float("inf")

ImageLike = Union[Tensor, np.ndarray]


class Ambiguity(str, Enum):
    """Transformations that leave a phase-retrieval measurement unchanged"""
    SHIFTS = "shifts"
    FLIPS = "flips"
    SIGN = "sign"


def _as_image(x: ImageLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(x_hat: ImageLike, x_ref: ImageLike, peak: float = 1.0) -> float:
    """10·log10(peak² / MSE); identical images give +inf"""
    a, b = _as_image(x_hat), _as_image(x_ref)
    if a.shape != b.shape:
        logger.error("PSNR shape mismatch", shapes=[a.shape, b.shape])
        raise ShapeMismatchError("PSNR needs images of equal shape", shapes=[a.shape, b.shape])
    if peak <= 0:
        logger.error("Invalid PSNR peak", peak=peak)
        raise ConfigurationError("peak must be positive", field_errors={"peak": str(peak)})
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return float(10.0 * np.log10(peak ** 2 / mse))


def _orbit(image: np.ndarray, group: Iterable[Ambiguity]) -> Iterator[np.ndarray]:
    group = set(group)
    signs = (1.0, -1.0) if Ambiguity.SIGN in group else (1.0,)
    flips = [(), (0,), (1,), (0, 1)] if Ambiguity.FLIPS in group else [()]
    if Ambiguity.SHIFTS in group:
        shifts = [(r, c) for r in range(image.shape[0]) for c in range(image.shape[1])]
    else:
        shifts = [(0, 0)]

    for sign in signs:
        for axes in flips:
            flipped = np.flip(image, axis=axes) if axes else image
            for shift in shifts:
                yield sign * np.roll(flipped, shift, axis=(0, 1))


def registered_psnr(x_hat: ImageLike, x_ref: ImageLike,
                    group: Sequence[Union[Ambiguity, str]] = (), peak: float = 1.0) -> float:
    """Best PSNR of x_hat over its orbit under the ambiguity group"""
    a, b = _as_image(x_hat), _as_image(x_ref)
    if a.shape != b.shape or a.ndim != 2:
        logger.error("Registered PSNR shape mismatch", shapes=[a.shape, b.shape])
        raise ShapeMismatchError("registered PSNR needs two equal 2-D images", shapes=[a.shape, b.shape])
    members = [Ambiguity(g) for g in group]
    best = -np.inf
    for candidate in _orbit(a, members):
        best = max(best, psnr(candidate, b, peak))
        if best == PSNR_INFINITE:
            break
    return float(best)


def average_psnr(values: Sequence[float]) -> float:
    """Mean over finite entries; +inf only when every entry is +inf"""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return PSNR_INFINITE if values.size else float("nan")
    return float(finite.mean())


@dataclass
class ScoreMatrix:
    """−ELBO proxy per (case, candidate); the row minimum marks the chosen model"""
    scores: np.ndarray
    case_labels: List[str] = field(default_factory=list)
    candidate_labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            logger.error("Score matrix is not 2-D", shape=self.scores.shape)
            raise ShapeMismatchError("scores must be a (cases, candidates) matrix", shapes=[self.scores.shape])
        if not np.all(np.isfinite(self.scores)):
            logger.error("Non-finite model selection scores", shape=self.scores.shape)
            raise NonFiniteError("Score matrix has non-finite entries", operation="model_selection")
        cases, candidates = self.scores.shape
        self.case_labels = list(self.case_labels) or [f"case_{i}" for i in range(cases)]
        self.candidate_labels = list(self.candidate_labels) or [f"candidate_{j}" for j in range(candidates)]
        if len(self.case_labels) != cases or len(self.candidate_labels) != candidates:
            logger.error("Score label count mismatch", shape=self.scores.shape)
            raise ShapeMismatchError("label counts do not match the score matrix", shapes=[self.scores.shape])

    def selected(self) -> np.ndarray:
        return np.argmin(self.scores, axis=1)

    def selected_labels(self) -> List[str]:
        return [self.candidate_labels[j] for j in self.selected()]

    def accuracy(self, expected: Sequence[int]) -> float:
        """Fraction of cases whose selected candidate is the expected one"""
        expected = np.asarray(expected)
        if expected.shape != (self.scores.shape[0],):
            logger.error("Expected label count mismatch", shape=expected.shape)
            raise ShapeMismatchError("one expected candidate per case", shapes=[expected.shape])
        return float(np.mean(self.selected() == expected))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.scores, columns=self.candidate_labels)
        frame.insert(0, "case", self.case_labels)
        frame["selected"] = self.selected_labels()
        return frame
