"""
Synthetic image sets sharing low-dimensional structure, and PGM directory loading.
All images lie in (0, 1): intensities are mapped to [0.05, 0.95].
"""

from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import structlog
from scipy import ndimage

from src.backend.core.exceptions import DatasetError
from src.backend.utils.array_io import load_pgm

logger = structlog.get_logger()

FLOOR = 0.05
SPAN = 0.9

Params = Mapping[str, float]


def _grid(size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    height, width = size
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return rows, cols


def _to_range(intensity: np.ndarray) -> np.ndarray:
    return FLOOR + SPAN * np.clip(intensity, 0.0, 1.0)


def _soft_disk(rows: np.ndarray, cols: np.ndarray, center: Tuple[float, float], radius: float,
               softness: float) -> np.ndarray:
    distance = np.hypot(rows - center[0], cols - center[1])
    return 0.5 * (1.0 + np.tanh((radius - distance) / softness))


def moving_disk(count: int, size: Tuple[int, int], params: Params, rng: np.random.Generator) -> List[np.ndarray]:
    """Disk translating on a ring by a fixed angular step per frame"""
    rows, cols = _grid(size)
    height, width = size
    scale = min(height, width)
    orbit = params.get("orbit_radius", 0.25) * scale
    radius = params.get("disk_radius", 0.15) * scale
    step = params.get("angular_step", 2.0 * np.pi / max(count, 1))
    start = params.get("start_angle", rng.uniform(0.0, 2.0 * np.pi))
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0

    frames = []
    for t in range(count):
        angle = start + t * step
        center = (cy + orbit * np.sin(angle), cx + orbit * np.cos(angle))
        frames.append(_to_range(_soft_disk(rows, cols, center, radius, params.get("softness", 0.75))))
    return frames


def crescent_ring(count: int, size: Tuple[int, int], params: Params, rng: np.random.Generator) -> List[np.ndarray]:
    """Annulus with a bright spot rotating slowly around it"""
    rows, cols = _grid(size)
    height, width = size
    scale = min(height, width)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ring_radius = params.get("ring_radius", 0.28) * scale
    thickness = params.get("thickness", 0.06) * scale
    contrast = params.get("contrast", 0.8)
    step = params.get("angular_step", 0.12)
    start = params.get("start_angle", rng.uniform(0.0, 2.0 * np.pi))

    distance = np.hypot(rows - cy, cols - cx)
    azimuth = np.arctan2(rows - cy, cols - cx)
    annulus = np.exp(-0.5 * ((distance - ring_radius) / thickness) ** 2)

    frames = []
    for t in range(count):
        brightness = (1.0 + contrast * np.cos(azimuth - (start + t * step))) / (1.0 + contrast)
        frames.append(_to_range(annulus * brightness))
    return frames


def _digit_pattern(label: int, rows: np.ndarray, cols: np.ndarray, size: Tuple[int, int],
                   rng: np.random.Generator, params: Params) -> np.ndarray:
    height, width = size
    jitter = params.get("jitter", 0.06) * min(height, width)
    cy = (height - 1) / 2.0 + rng.uniform(-jitter, jitter)
    cx = (width - 1) / 2.0 + rng.uniform(-jitter, jitter)
    width_scale = rng.uniform(0.8, 1.2) * params.get("stroke", 0.07) * min(height, width)

    if label == 0:
        # loop: ellipse outline
        ry = rng.uniform(0.26, 0.32) * height
        rx = rng.uniform(0.16, 0.22) * width
        radial = np.hypot((rows - cy) / ry, (cols - cx) / rx)
        return np.exp(-0.5 * ((radial - 1.0) * min(ry, rx) / width_scale) ** 2)

    # stroke: slanted vertical bar
    slant = rng.uniform(-0.25, 0.25)
    half_length = rng.uniform(0.28, 0.36) * height
    along = rows - cy
    across = (cols - cx) - slant * along
    bar = np.exp(-0.5 * (across / width_scale) ** 2)
    return bar * 0.5 * (1.0 + np.tanh((half_length - np.abs(along)) / 0.75))


def two_class_digits(count: int, size: Tuple[int, int], params: Params, rng: np.random.Generator) -> List[np.ndarray]:
    """Digit-like blob patterns of class 0 (loop) or 1 (stroke)"""
    label = int(params.get("class", 0))
    if label not in (0, 1):
        raise DatasetError("two-class-digits class must be 0 or 1", name="two-class-digits")
    rows, cols = _grid(size)
    return [_to_range(_digit_pattern(label, rows, cols, size, rng, params)) for _ in range(count)]


def random_blobs(count: int, size: Tuple[int, int], params: Params, rng: np.random.Generator) -> List[np.ndarray]:
    """One to max_blobs Gaussian blobs at random positions"""
    rows, cols = _grid(size)
    height, width = size
    max_blobs = int(params.get("max_blobs", 3))
    frames = []
    for _ in range(count):
        intensity = np.zeros(size)
        for _ in range(rng.integers(1, max_blobs + 1)):
            cy = rng.uniform(0.25, 0.75) * (height - 1)
            cx = rng.uniform(0.25, 0.75) * (width - 1)
            spread = rng.uniform(0.06, 0.14) * min(height, width)
            intensity += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((rows - cy) ** 2 + (cols - cx) ** 2) / spread ** 2)
        frames.append(_to_range(intensity))
    return frames


GENERATORS: Dict[str, Callable[..., List[np.ndarray]]] = {
    "moving-disk": moving_disk,
    "crescent-ring": crescent_ring,
    "two-class-digits": two_class_digits,
    "random-blobs": random_blobs,
}


def synth_dataset(name: str, params: Optional[Params] = None, seed: int = 0, count: int = 20,
                  size: Tuple[int, int] = (32, 32)) -> List[np.ndarray]:
    """N images in (0, 1) of shape size; deterministic per seed"""
    if name not in GENERATORS:
        raise DatasetError(f"Unknown dataset '{name}'; expected one of {sorted(GENERATORS)}", name=name)
    if count < 1 or min(size) < 1:
        raise DatasetError("count and size must be positive", name=name)
    images = GENERATORS[name](count, tuple(size), dict(params or {}), np.random.default_rng(seed))
    logger.info("Dataset synthesized", name=name, count=count, size=list(size), seed=seed)
    return images


def load_pgm_directory(directory: Path, size: Optional[Tuple[int, int]] = None,
                       count: Optional[int] = None) -> List[np.ndarray]:
    """PGM files in name order, resampled to size if given, mapped into (0, 1)"""
    directory = Path(directory)
    files = sorted(directory.glob("*.pgm"))
    if not files:
        raise DatasetError(f"No PGM images in {directory}", name=str(directory))
    if count is not None:
        files = files[:count]

    images = []
    for path in files:
        image = load_pgm(path)
        if size is not None and image.shape != tuple(size):
            factors = (size[0] / image.shape[0], size[1] / image.shape[1])
            image = np.clip(ndimage.zoom(image, factors, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)
            if image.shape != tuple(size):
                raise DatasetError(f"Could not resample {path.name} to {tuple(size)}", name=str(path))
        images.append(_to_range(image))
    logger.info("Dataset loaded", directory=str(directory), count=len(images))
    return images
