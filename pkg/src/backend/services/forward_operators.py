"""
Measurement operators and noise model.
Covers denoising, interferometric and Gaussian compressed sensing, and
Fourier / Gaussian phase retrieval, plus SNR calibration, dirty images,
synthetic UV coverage and low-pass reference targets.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from src.backend.core.exceptions import ForwardModelError, ShapeMismatchError
from src.backend.models.measurement_models import ForwardModel, MeasurementKind
from src.backend.services.autodiff import Tensor, matmul, reshape, sqrt, square

logger = structlog.get_logger()

MODULUS_FLOOR = 1e-8


def _visibility_rows(uv_points: Sequence[Tuple[float, float]], height: int, width: int) -> np.ndarray:
    """Interleaved (Re, Im) rows of V(u,v) = Σ x[p,q]·exp(−2πi(up/H + vq/W)) / √(HW)"""
    uv = np.asarray(uv_points, dtype=np.float64)
    p, q = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    phase = 2.0 * np.pi * (np.outer(uv[:, 0], p.ravel()) / height + np.outer(uv[:, 1], q.ravel()) / width)
    scale = 1.0 / np.sqrt(height * width)
    stacked = np.empty((2 * len(uv), height * width))
    stacked[0::2] = np.cos(phase) * scale
    stacked[1::2] = -np.sin(phase) * scale
    return stacked


def _gaussian_rows(seed: int, rows: int, pixels: int) -> np.ndarray:
    """Complex iid entries of variance 1/m, stored as interleaved (Re, Im) rows"""
    rng = np.random.default_rng(seed)
    component_std = np.sqrt(1.0 / (2.0 * rows))
    stacked = np.empty((2 * rows, pixels))
    stacked[0::2] = rng.normal(0.0, component_std, size=(rows, pixels))
    stacked[1::2] = rng.normal(0.0, component_std, size=(rows, pixels))
    return stacked


def _padded_dft(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of the unitary 2n-point DFT restricted to n inputs"""
    k = np.arange(2 * n)[:, None]
    p = np.arange(n)[None, :]
    phase = 2.0 * np.pi * k * p / (2 * n)
    scale = 1.0 / np.sqrt(2 * n)
    return np.cos(phase) * scale, -np.sin(phase) * scale


def _smoothed_modulus(pairs: Tensor) -> Tensor:
    """√(re² + im² + δ²) row-wise for an (m, 2) tensor of (re, im) pairs"""
    return sqrt(square(pairs).sum(axes=1) + MODULUS_FLOOR ** 2)


class ForwardOperator:
    """Materialized measurement operator of one ForwardModel"""

    def __init__(self, model: ForwardModel):
        self.model = model
        height, width = model.geometry
        self._stacked: Optional[np.ndarray] = None

        if model.kind is MeasurementKind.INTERFEROMETRIC_CS:
            self._stacked = _visibility_rows(model.uv_points, height, width)
        elif model.kind in (MeasurementKind.GAUSSIAN_CS, MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL):
            self._stacked = _gaussian_rows(model.matrix_seed, model.rows, height * width)
        elif model.kind is MeasurementKind.FOURIER_PHASE_RETRIEVAL:
            self._rows_re, self._rows_im = _padded_dft(height)
            self._cols_re, self._cols_im = _padded_dft(width)

        if self._stacked is not None:
            self._stacked.flags.writeable = False
        logger.debug("Forward operator built", kind=model.kind.value, measurements=model.measurement_dim)

    @property
    def stacked_matrix(self) -> np.ndarray:
        """Real (2m, HW) matrix of interleaved (Re, Im) rows"""
        if self._stacked is None:
            logger.error("Dense matrix unavailable", kind=self.model.kind.value)
            raise ForwardModelError("Operator has no dense sensing matrix", kind=self.model.kind.value)
        return self._stacked

    def _check_geometry(self, x: Tensor) -> None:
        if x.shape != tuple(self.model.geometry):
            logger.error("Image geometry mismatch", kind=self.model.kind.value, shape=x.shape, geometry=self.model.geometry)
            raise ForwardModelError(
                f"Image shape {x.shape} does not match geometry {tuple(self.model.geometry)}",
                kind=self.model.kind.value,
            )

    def apply(self, x: Tensor) -> Tensor:
        """Noiseless measurement vector; differentiable in x"""
        self._check_geometry(x)
        kind = self.model.kind
        height, width = self.model.geometry
        pixels = height * width

        if kind is MeasurementKind.DENOISE:
            return reshape(x, (pixels,))

        if kind is MeasurementKind.FOURIER_PHASE_RETRIEVAL:
            left_re = matmul(self._rows_re, x)
            left_im = matmul(self._rows_im, x)
            real = matmul(left_re, self._cols_re.T) - matmul(left_im, self._cols_im.T)
            imag = matmul(left_re, self._cols_im.T) + matmul(left_im, self._cols_re.T)
            modulus = sqrt(square(real) + square(imag) + MODULUS_FLOOR ** 2)
            return reshape(modulus, (4 * pixels,))

        stacked = matmul(self._stacked, reshape(x, (pixels, 1)))
        if kind is MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL:
            return _smoothed_modulus(reshape(stacked, (self.model.rows, 2)))
        return reshape(stacked, (self._stacked.shape[0],))

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        return self.apply(Tensor(x)).data

    def adjoint(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Real and imaginary parts of Aᴴy reshaped to the image geometry"""
        if not self.model.is_linear:
            logger.error("Adjoint of a nonlinear operator", kind=self.model.kind.value)
            raise ForwardModelError("Adjoint is defined for linear operators only", kind=self.model.kind.value)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.model.measurement_dim,):
            logger.error("Measurement length mismatch", length=y.shape, expected=self.model.measurement_dim)
            raise ShapeMismatchError("Measurement vector has the wrong length", shapes=[y.shape])
        geometry = tuple(self.model.geometry)
        if self.model.kind is MeasurementKind.DENOISE:
            return y.reshape(geometry), np.zeros(geometry)
        real_rows, imag_rows = self._stacked[0::2], self._stacked[1::2]
        y_re, y_im = y[0::2], y[1::2]
        real = real_rows.T @ y_re + imag_rows.T @ y_im
        imag = real_rows.T @ y_im - imag_rows.T @ y_re
        return real.reshape(geometry), imag.reshape(geometry)

    def initial_image(self, y: np.ndarray) -> np.ndarray:
        """Starting point for iterative solvers: adjoint for linear kinds, mid-gray otherwise"""
        if self.model.is_linear:
            return self.adjoint(y)[0]
        return np.full(tuple(self.model.geometry), 0.5)


@lru_cache(maxsize=32)
def operator_for(model: ForwardModel) -> ForwardOperator:
    """Cached operator; ForwardModel is frozen and hashable"""
    return ForwardOperator(model)


def apply(model: ForwardModel, x: Union[Tensor, np.ndarray]) -> Tensor:
    """Noiseless f(x)"""
    return operator_for(model).apply(x if isinstance(x, Tensor) else Tensor(x))


def add_noise(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """iid N(0, σ²) on every real component (complex data: on Re and Im separately)"""
    if sigma <= 0:
        logger.error("Invalid noise level", sigma=sigma)
        raise ForwardModelError("sigma must be positive")
    clean = np.asarray(clean, dtype=np.float64)
    return clean + rng.normal(0.0, sigma, size=clean.shape)


def snr_db(clean: np.ndarray, sigma: float) -> float:
    """20·log₁₀(‖clean‖₂ / (σ·√m))"""
    clean = np.asarray(clean, dtype=np.float64)
    norm = float(np.linalg.norm(clean))
    if norm == 0.0:
        logger.error("SNR of a zero signal")
        raise ForwardModelError("SNR is undefined for an all-zero signal")
    return 20.0 * np.log10(norm / (sigma * np.sqrt(clean.size)))


def calibrate_sigma(clean: np.ndarray, target_snr_db: float) -> float:
    """Noise level giving the requested SNR (inverse of snr_db)"""
    clean = np.asarray(clean, dtype=np.float64)
    norm = float(np.linalg.norm(clean))
    if norm == 0.0:
        logger.error("Noise calibration on a zero signal", target_snr_db=target_snr_db)
        raise ForwardModelError("Cannot calibrate noise against an all-zero signal")
    return norm / (np.sqrt(clean.size) * 10.0 ** (target_snr_db / 20.0))


def dirty_image(model: ForwardModel, y: np.ndarray) -> np.ndarray:
    """Re(Aᴴy) of an interferometric measurement"""
    if model.kind is not MeasurementKind.INTERFEROMETRIC_CS:
        logger.error("Dirty image of a non-interferometric model", kind=model.kind.value)
        raise ForwardModelError("Dirty images need an interferometric model", kind=model.kind.value)
    return operator_for(model).adjoint(y)[0]


def synth_uv_coverage(
    geometry: Tuple[int, int],
    num_tracks: int,
    points_per_track: int,
    max_radius: float,
    seed: int,
) -> np.ndarray:
    """
    Earth-rotation-style elliptical arcs, mirrored so every (u, v)
    is paired with (−u, −v).

    Returns:
        (2·num_tracks·points_per_track, 2) array of (u, v) in cycles per image
    """
    nyquist = min(geometry) / 2.0
    if max_radius > nyquist:
        logger.error("UV radius beyond Nyquist", max_radius=max_radius, nyquist=nyquist)
        raise ForwardModelError(f"max_radius {max_radius} exceeds the Nyquist radius {nyquist}")

    rng = np.random.default_rng(seed)
    tracks: List[np.ndarray] = []
    for _ in range(num_tracks):
        baseline = max_radius * rng.uniform(0.3, 1.0)
        ellipticity = rng.uniform(0.3, 1.0)
        position_angle = rng.uniform(0.0, np.pi)
        start = rng.uniform(0.0, 2.0 * np.pi)
        span = rng.uniform(np.pi / 3.0, np.pi)
        hours = start + span * np.linspace(0.0, 1.0, points_per_track)
        u0 = baseline * np.cos(hours)
        v0 = baseline * ellipticity * np.sin(hours)
        u = u0 * np.cos(position_angle) - v0 * np.sin(position_angle)
        v = u0 * np.sin(position_angle) + v0 * np.cos(position_angle)
        tracks.append(np.stack([u, v], axis=1))

    points = np.concatenate(tracks, axis=0)
    coverage = np.concatenate([points, -points], axis=0)
    logger.info("UV coverage synthesized", points=len(coverage), fraction=coverage_fraction(coverage, geometry))
    return coverage


def coverage_fraction(uv_points: np.ndarray, geometry: Tuple[int, int]) -> float:
    """Unique rounded grid cells covered / total grid cells"""
    cells = {(int(round(u)), int(round(v))) for u, v in np.asarray(uv_points)}
    return len(cells) / float(geometry[0] * geometry[1])


def full_grid_coverage(geometry: Tuple[int, int]) -> np.ndarray:
    """Every integer frequency of the H×W grid"""
    height, width = geometry
    u = np.fft.fftfreq(height) * height
    v = np.fft.fftfreq(width) * width
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def low_pass_target(x: np.ndarray, radius: float) -> np.ndarray:
    """Keep DFT coefficients with √(u² + v²) ≤ radius, return the real part"""
    if radius < 0:
        logger.error("Negative low-pass radius", radius=radius)
        raise ForwardModelError("Low-pass radius must be non-negative")
    height, width = x.shape
    spectrum = np.fft.fft2(x, norm="ortho")
    u = np.fft.fftfreq(height) * height
    v = np.fft.fftfreq(width) * width
    keep = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2) <= radius
    return np.real(np.fft.ifft2(spectrum * keep, norm="ortho"))


@dataclass(frozen=True)
class MeasurementSet:
    """N observations sharing one forward model"""
    observations: np.ndarray
    model: ForwardModel
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.observations.ndim != 2 or self.observations.shape[1] != self.model.measurement_dim:
            logger.error("Observation stack shape mismatch", shape=self.observations.shape, expected=self.model.measurement_dim)
            raise ShapeMismatchError(
                f"observations must be (N, {self.model.measurement_dim})", shapes=[self.observations.shape]
            )
        if self.ground_truth is not None and self.ground_truth.shape[0] != self.observations.shape[0]:
            logger.error("Ground truth count mismatch", observations=len(self.observations), ground_truth=len(self.ground_truth))
            raise ShapeMismatchError("ground truth count differs from observations", shapes=[self.ground_truth.shape])

    def __len__(self) -> int:
        return self.observations.shape[0]


def clean_measurements(model: ForwardModel, images: np.ndarray) -> np.ndarray:
    """Stack of noiseless f(x) for each image"""
    operator = operator_for(model)
    return np.stack([operator.apply_array(image) for image in images])


def measure(model: ForwardModel, images: np.ndarray, rng: np.random.Generator) -> MeasurementSet:
    """Noisy measurements y = f(x) + η of each image"""
    clean = clean_measurements(model, images)
    noisy = np.stack([add_noise(row, model.sigma, rng) for row in clean])
    logger.info("Measurements synthesized", count=len(images), kind=model.kind.value, snr_db=snr_db(clean, model.sigma))
    return MeasurementSet(observations=noisy, model=model, ground_truth=np.asarray(images, dtype=np.float64))
