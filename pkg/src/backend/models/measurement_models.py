"""
Forward model descriptions for the supported measurement operators
"""

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, Tuple
from enum import Enum


class MeasurementKind(str, Enum):
    """Measurement operator kinds"""
    DENOISE = "denoise"
    INTERFEROMETRIC_CS = "interferometric_cs"
    GAUSSIAN_CS = "gaussian_cs"
    FOURIER_PHASE_RETRIEVAL = "fourier_phase_retrieval"
    GAUSSIAN_PHASE_RETRIEVAL = "gaussian_phase_retrieval"


COMPLEX_KINDS = frozenset({MeasurementKind.INTERFEROMETRIC_CS, MeasurementKind.GAUSSIAN_CS})
LINEAR_KINDS = frozenset({MeasurementKind.DENOISE, MeasurementKind.INTERFEROMETRIC_CS, MeasurementKind.GAUSSIAN_CS})
GAUSSIAN_KINDS = frozenset({MeasurementKind.GAUSSIAN_CS, MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL})


class ForwardModel(BaseModel):
    """Tagged measurement operator f with noise level sigma"""
    model_config = ConfigDict(frozen=True)

    kind: MeasurementKind = Field(..., description="Operator kind")
    sigma: float = Field(..., gt=0, description="Noise std per real measurement component")
    geometry: Tuple[int, int] = Field(..., description="Image (H, W)")
    uv_points: Optional[Tuple[Tuple[float, float], ...]] = Field(None, description="(u, v) in cycles per image")
    matrix_seed: Optional[int] = Field(None, ge=0, description="Seed of the Gaussian sensing matrix")
    rows: Optional[int] = Field(None, ge=1, description="Complex rows of the Gaussian sensing matrix")

    @field_validator("geometry")
    @classmethod
    def validate_geometry(cls, v):
        """Image extents must be positive"""
        if v[0] < 1 or v[1] < 1:
            raise ValueError("Geometry extents must be positive")
        return v

    @model_validator(mode="after")
    def validate_kind_fields(self):
        """Each kind carries the fields it needs"""
        height, width = self.geometry
        if self.kind is MeasurementKind.INTERFEROMETRIC_CS:
            if not self.uv_points:
                raise ValueError("interferometric_cs needs uv_points")
            for u, v in self.uv_points:
                if abs(u) > height / 2 or abs(v) > width / 2:
                    raise ValueError(f"uv point ({u}, {v}) outside the Nyquist square")
        if self.kind in GAUSSIAN_KINDS and (self.matrix_seed is None or self.rows is None):
            raise ValueError(f"{self.kind.value} needs matrix_seed and rows")
        return self

    @property
    def is_complex(self) -> bool:
        return self.kind in COMPLEX_KINDS

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def measurement_dim(self) -> int:
        """Number of real measurement components"""
        height, width = self.geometry
        if self.kind is MeasurementKind.DENOISE:
            return height * width
        if self.kind is MeasurementKind.INTERFEROMETRIC_CS:
            return 2 * len(self.uv_points)
        if self.kind is MeasurementKind.GAUSSIAN_CS:
            return 2 * self.rows
        if self.kind is MeasurementKind.FOURIER_PHASE_RETRIEVAL:
            return 4 * height * width
        return self.rows
