"""
Ring profiles: bilinear samples of an image along a circle, and their
stacking over video frames into a space × time image.
"""

from typing import Sequence, Tuple

import numpy as np
import structlog
from scipy import ndimage

from src.backend.core.exceptions import RingOutOfBoundsError, ShapeMismatchError

logger = structlog.get_logger()


def ring_angles(n_angles: int) -> np.ndarray:
    """Equispaced angles starting at 0 (pointing along +column)"""
    return 2.0 * np.pi * np.arange(n_angles) / n_angles


def ring_coordinates(center: Tuple[float, float], radius: float, n_angles: int) -> np.ndarray:
    """(2, n) array of (row, col) sample positions"""
    angles = ring_angles(n_angles)
    return np.stack([center[0] + radius * np.sin(angles), center[1] + radius * np.cos(angles)])


def ring_profile(image: np.ndarray, center: Tuple[float, float], radius: float, n_angles: int = 64) -> np.ndarray:
    """Bilinear samples at n_angles points on the circle; the ring must stay inside the image"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError("ring profile needs a 2-D image", shapes=[image.shape])
    if n_angles < 1 or radius < 0:
        raise RingOutOfBoundsError("ring needs n_angles ≥ 1 and radius ≥ 0", center=center, radius=radius)
    height, width = image.shape
    cy, cx = center
    if cy - radius < 0 or cx - radius < 0 or cy + radius > height - 1 or cx + radius > width - 1:
        raise RingOutOfBoundsError(
            f"Ring at {tuple(center)} with radius {radius} leaves the {height}x{width} image",
            center=list(center),
            radius=radius,
        )
    return ndimage.map_coordinates(image, ring_coordinates(center, radius, n_angles), order=1, mode="nearest")


def unwrap_ring(frames: Sequence[np.ndarray], center: Tuple[float, float], radius: float,
                n_angles: int = 64) -> np.ndarray:
    """(frames, n_angles) space × time image"""
    if len(frames) == 0:
        raise ShapeMismatchError("unwrap needs at least one frame")
    profiles = np.stack([ring_profile(frame, center, radius, n_angles) for frame in frames])
    logger.debug("Ring unwrapped", frames=len(frames), n_angles=n_angles, radius=radius)
    return profiles
