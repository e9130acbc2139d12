"""
Deep Decoder architecture models
"""

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, Tuple


def upsample_count(output_size: Tuple[int, int], seed_size: Tuple[int, int], num_layers: int) -> Optional[int]:
    """Number of ×2 upsampling layers mapping seed_size to output_size, or None if unreachable"""
    for layers in range(num_layers + 1):
        scale = 2 ** layers
        if seed_size[0] * scale == output_size[0] and seed_size[1] * scale == output_size[1]:
            return layers
    return None


class DeepDecoderConfig(BaseModel):
    """Hyperparameters of the shared image generation model"""
    model_config = ConfigDict(frozen=True)

    num_layers: int = Field(6, ge=1, description="Number of hidden 1x1-conv layers")
    channels: int = Field(150, ge=1, description="Channels per hidden layer")
    latent_dim: int = Field(40, ge=1, description="Latent vector size")
    output_size: Tuple[int, int] = Field((32, 32), description="Output image (H, W)")
    output_channels: int = Field(1, ge=1, description="Output channels (1 = grayscale)")
    dropout_rate: float = Field(1e-4, ge=0.0, lt=1.0, description="Activation dropout probability")
    seed_spatial_size: Tuple[int, int] = Field((4, 4), description="(h0, w0) of the projected feature map")

    @field_validator("output_size", "seed_spatial_size")
    @classmethod
    def validate_extents(cls, v):
        """Spatial extents must be positive"""
        if v[0] < 1 or v[1] < 1:
            raise ValueError("Spatial extents must be positive")
        return v

    @model_validator(mode="after")
    def validate_geometry(self):
        """Output size must be the seed size doubled at most num_layers times"""
        if upsample_count(self.output_size, self.seed_spatial_size, self.num_layers) is None:
            raise ValueError(
                f"output_size {self.output_size} is not seed_spatial_size {self.seed_spatial_size} "
                f"doubled at most {self.num_layers} times"
            )
        return self

    @property
    def upsample_layers(self) -> Optional[int]:
        return upsample_count(self.output_size, self.seed_spatial_size, self.num_layers)

    def parameter_count(self) -> int:
        """Closed-form number of scalar weights"""
        h0, w0 = self.seed_spatial_size
        projection = self.latent_dim * self.channels * h0 * w0
        hidden = self.num_layers * (self.channels * self.channels + 2 * self.channels)
        return projection + hidden + self.output_channels * self.channels
