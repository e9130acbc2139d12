"""
Deep Decoder image generation model G_θ.
Maps a latent vector through a learned projection, 1x1 convolutions,
bilinear ×2 upsampling, channel normalization and activation dropout
to an image in (0, 1).
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Protocol, Tuple

import numpy as np
import structlog

from src.backend.core.exceptions import ConfigurationError, GeneratorConfigError, ShapeMismatchError
from src.backend.models.generator_models import DeepDecoderConfig, upsample_count
from src.backend.services.autodiff import (
    Tape,
    Tensor,
    matmul,
    relu,
    repeat_columns,
    reshape,
    sigmoid,
    sqrt,
    square,
)

logger = structlog.get_logger()

CHANNEL_NORM_EPS = 1e-6


class GeneratorMode(str, Enum):
    """Forward-pass mode; dropout is active only in training"""
    TRAIN = "train"
    EVAL = "eval"


class ImageGenerator(Protocol):
    """Anything the objective can push latent samples through"""

    @property
    def latent_dim(self) -> int: ...

    @property
    def image_shape(self) -> Tuple[int, ...]: ...

    def named_tensors(self) -> Dict[str, Tensor]: ...

    def watch(self, tape: Tape) -> "ImageGenerator": ...

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ImageGenerator": ...

    def generate(self, z: Tensor, mode: GeneratorMode = GeneratorMode.EVAL,
                 rng: Optional[np.random.Generator] = None) -> Tensor: ...


@dataclass(frozen=True)
class GeneratorParams:
    """All Deep Decoder weights θ, in declared order"""
    config: DeepDecoderConfig
    weights: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def image_shape(self) -> Tuple[int, ...]:
        height, width = self.config.output_size
        if self.config.output_channels == 1:
            return (height, width)
        return (self.config.output_channels, height, width)

    def named_tensors(self) -> Dict[str, Tensor]:
        return dict(self.weights)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.weights.items()}

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.weights.values())

    def watch(self, tape: Tape) -> "GeneratorParams":
        """Same weights registered as leaves of a tape"""
        return GeneratorParams(self.config, {name: tape.leaf(t.data) for name, t in self.weights.items()})

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "GeneratorParams":
        return GeneratorParams(self.config, {name: Tensor(arrays[name]) for name in self.weights})

    def generate(self, z: Tensor, mode: GeneratorMode = GeneratorMode.EVAL,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return generate(self, z, mode, rng)


@dataclass(frozen=True)
class LatentIdentityGenerator:
    """Explicit Gaussian image model x = z reshaped; has no trainable weights"""
    shape: Tuple[int, ...]

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.shape))

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.shape)

    def named_tensors(self) -> Dict[str, Tensor]:
        return {}

    def watch(self, tape: Tape) -> "LatentIdentityGenerator":
        return self

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "LatentIdentityGenerator":
        return self

    def generate(self, z: Tensor, mode: GeneratorMode = GeneratorMode.EVAL,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return reshape(z, self.image_shape)


def weight_names(config: DeepDecoderConfig) -> List[str]:
    """Declared order of the weight arrays (also the checkpoint order)"""
    names = ["projection"]
    for layer in range(config.num_layers):
        names += [f"conv_{layer}", f"norm_scale_{layer}", f"norm_bias_{layer}"]
    names.append("output")
    return names


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_generator(config: DeepDecoderConfig, seed: int) -> GeneratorParams:
    """Fan-in scaled uniform weights; norm scales 1, biases 0"""
    upsampling = upsample_count(config.output_size, config.seed_spatial_size, config.num_layers)
    if upsampling is None:
        raise GeneratorConfigError(
            "output_size is not reachable by doubling seed_spatial_size",
            output_size=config.output_size,
            seed_size=config.seed_spatial_size,
        )

    rng = np.random.default_rng(seed)
    h0, w0 = config.seed_spatial_size
    channels = config.channels
    arrays: Dict[str, np.ndarray] = {
        "projection": _uniform(rng, (channels * h0 * w0, config.latent_dim), config.latent_dim)
    }
    for layer in range(config.num_layers):
        arrays[f"conv_{layer}"] = _uniform(rng, (channels, channels), channels)
        arrays[f"norm_scale_{layer}"] = np.ones(channels)
        arrays[f"norm_bias_{layer}"] = np.zeros(channels)
    arrays["output"] = _uniform(rng, (config.output_channels, channels), channels)

    params = GeneratorParams(config, {name: Tensor(arrays[name]) for name in weight_names(config)})
    logger.info(
        "Generator initialized",
        layers=config.num_layers,
        channels=channels,
        upsample_layers=upsampling,
        parameters=params.parameter_count(),
    )
    return params


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: Bernoulli(1 - rate) scaled by 1 / (1 - rate)"""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError("dropout rate must lie in [0, 1)", field_errors={"rate": str(rate)})
    if rate == 0.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


def _upsample_1d(n: int) -> np.ndarray:
    # bilinear, align_corners=False, factor 2
    matrix = np.zeros((2 * n, n))
    for i in range(2 * n):
        source = max((i + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(np.floor(source)), n - 1)
        hi = min(lo + 1, n - 1)
        frac = source - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


@lru_cache(maxsize=16)
def upsample_matrix(height: int, width: int) -> np.ndarray:
    """(4hw, hw) operator acting on row-major flattened pixels"""
    matrix = np.kron(_upsample_1d(height), _upsample_1d(width))
    matrix.flags.writeable = False
    return matrix


def channel_normalize(x: Tensor, eps: float = CHANNEL_NORM_EPS) -> Tensor:
    """Per-channel zero mean / unit variance over pixels of a (C, P) feature map"""
    pixels = x.shape[1]
    centered = x - repeat_columns(x.mean(axes=1, keepdims=True), pixels)
    variance = square(centered).mean(axes=1, keepdims=True)
    return centered / repeat_columns(sqrt(variance + eps), pixels)


def generate(params: GeneratorParams, z: Tensor, mode: GeneratorMode = GeneratorMode.EVAL,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """Push one latent vector through the Deep Decoder"""
    config = params.config
    weights = params.weights
    if z.shape != (config.latent_dim,):
        raise ShapeMismatchError(f"latent must have shape ({config.latent_dim},)", shapes=[z.shape])
    mode = GeneratorMode(mode)
    use_dropout = mode is GeneratorMode.TRAIN and config.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ConfigurationError("Training-mode generation needs an rng for dropout")

    height, width = config.seed_spatial_size
    upsampling = config.upsample_layers
    x = reshape(matmul(weights["projection"], reshape(z, (config.latent_dim, 1))),
                (config.channels, height * width))

    for layer in range(config.num_layers):
        x = matmul(weights[f"conv_{layer}"], x)
        if layer < upsampling:
            x = matmul(x, upsample_matrix(height, width).T)
            height, width = 2 * height, 2 * width
        x = channel_normalize(relu(x))
        pixels = height * width
        scale = repeat_columns(reshape(weights[f"norm_scale_{layer}"], (config.channels, 1)), pixels)
        bias = repeat_columns(reshape(weights[f"norm_bias_{layer}"], (config.channels, 1)), pixels)
        x = x * scale + bias
        if use_dropout:
            x = x * dropout_mask(x.shape, config.dropout_rate, rng)

    image = sigmoid(matmul(weights["output"], x))
    return reshape(image, params.image_shape)
