"""
Experiment configuration models
"""

from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Dict, List, Optional, Tuple
from enum import Enum
from pathlib import Path

from src.backend.models.generator_models import DeepDecoderConfig
from src.backend.models.measurement_models import GAUSSIAN_KINDS, MeasurementKind
from src.backend.models.training_models import TrainConfig


class ExperimentKind(str, Enum):
    """Experiment types"""
    DENOISE = "denoise"
    CS_INTERFEROMETRY = "cs-interferometry"
    PHASE_RETRIEVAL = "phase-retrieval"
    MODEL_SELECT = "model-select"
    BASELINE = "baseline"


PHASE_RETRIEVAL_KINDS = frozenset({MeasurementKind.FOURIER_PHASE_RETRIEVAL, MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL})


class DatasetSpec(BaseModel):
    """Synthetic generator or PGM directory"""
    name: Optional[str] = Field(None, description="Synthetic generator name")
    params: Dict[str, float] = Field(default_factory=dict, description="Generator parameters")
    count: int = Field(20, ge=1, description="Number of images")
    size: Tuple[int, int] = Field((32, 32), description="Image (H, W)")
    input_dir: Optional[Path] = Field(None, description="Directory of PGM images")

    @field_validator("input_dir")
    @classmethod
    def validate_input_dir(cls, v):
        """Referenced directories must exist at load"""
        if v is not None and not Path(v).is_dir():
            raise ValueError(f"input_dir {v} does not exist")
        return v

    @model_validator(mode="after")
    def validate_source(self):
        """Exactly one of name / input_dir"""
        if (self.name is None) == (self.input_dir is None):
            raise ValueError("Give exactly one of dataset name or input_dir")
        return self


class UvCoverageSpec(BaseModel):
    """Synthetic interferometer track coverage"""
    num_tracks: int = Field(12, ge=1, description="Baseline tracks")
    points_per_track: int = Field(24, ge=1, description="Samples per track")
    max_radius: Optional[float] = Field(None, gt=0, description="Longest baseline in cycles per image (default: Nyquist)")
    seed: int = Field(0, ge=0, description="Track layout seed")
    full_grid: bool = Field(False, description="Sample every grid frequency instead of tracks")


class ForwardModelSettings(BaseModel):
    """Measurement operator of an experiment; the geometry comes from the dataset"""
    kind: MeasurementKind = Field(MeasurementKind.DENOISE)
    sigma: Optional[float] = Field(None, gt=0, description="Noise std per real component")
    target_snr_db: Optional[float] = Field(None, description="Calibrate sigma to this SNR instead")
    uv: UvCoverageSpec = Field(default_factory=UvCoverageSpec)
    rows: Optional[int] = Field(None, ge=1, description="Gaussian sensing rows")
    rows_per_pixel: Optional[float] = Field(None, gt=0, description="Gaussian sensing rows as a multiple of HW")
    matrix_seed: int = Field(0, ge=0, description="Gaussian sensing matrix seed")
    low_pass_radius: Optional[float] = Field(None, ge=0, description="Reference low-pass radius (default: longest baseline)")

    @model_validator(mode="after")
    def validate_noise(self):
        """Exactly one of sigma / target_snr_db"""
        if (self.sigma is None) == (self.target_snr_db is None):
            raise ValueError("Give exactly one of sigma or target_snr_db")
        if self.kind in GAUSSIAN_KINDS and self.rows is None and self.rows_per_pixel is None:
            raise ValueError(f"{self.kind.value} needs rows or rows_per_pixel")
        return self

    def row_count(self, geometry: Tuple[int, int]) -> Optional[int]:
        if self.rows is not None:
            return self.rows
        if self.rows_per_pixel is not None:
            return max(1, int(round(self.rows_per_pixel * geometry[0] * geometry[1])))
        return None


class ReconstructionSettings(BaseModel):
    """Posterior sampling for reported reconstructions"""
    n_samples: int = Field(16, ge=1, description="Posterior samples per measurement")
    saved_samples: int = Field(4, ge=0, description="Samples written per measurement")


class BaselineSettings(BaseModel):
    """Comparison methods"""
    tv_lambdas: List[float] = Field(default_factory=lambda: [20.0], description="TV-RML weights, on the scale of the 1/σ² data weight")
    tv_iters: int = Field(300, ge=0)
    tv_step: float = Field(1.0, gt=0)
    dip_iters: int = Field(500, ge=0)
    dip_checkpoint_interval: int = Field(50, ge=1)
    dip_lr: float = Field(1e-2, gt=0)
    indices: Optional[List[int]] = Field(None, description="Measurement indices to run (default: all)")

    @field_validator("tv_lambdas")
    @classmethod
    def validate_lambdas(cls, v):
        """TV weights are non-negative"""
        if any(lam < 0 for lam in v):
            raise ValueError("tv_lambdas must be non-negative")
        return v


class ModelSelectionSettings(BaseModel):
    """Candidate training sets and held-out cases"""
    candidate_params: List[Dict[str, float]] = Field(..., description="Dataset params of each candidate's training set")
    candidate_labels: Optional[List[str]] = None
    cases_per_candidate: int = Field(10, ge=1, description="Held-out cases drawn from each candidate's class")
    case_seed_offset: int = Field(1000, ge=1, description="Seed offset of held-out cases")
    include_identity: bool = Field(False, description="Add the explicit Gaussian image model as a candidate")
    fit_iters: int = Field(300, ge=0, description="Posterior fitting steps per cell")
    eval_samples: int = Field(64, ge=1, description="Samples of the final score")

    @model_validator(mode="after")
    def validate_candidates(self):
        """At least two candidates, labels matching"""
        total = len(self.candidate_params) + (1 if self.include_identity else 0)
        if total < 2:
            raise ValueError("model selection needs at least two candidates")
        if self.candidate_labels is not None and len(self.candidate_labels) != len(self.candidate_params):
            raise ValueError("one label per candidate")
        return self

    def labels(self) -> List[str]:
        return self.candidate_labels or [f"class_{i}" for i in range(len(self.candidate_params))]


class RingSpec(BaseModel):
    """Circle along which video frames are unwrapped"""
    center: Tuple[float, float] = Field(..., description="(row, col) in pixels")
    radius: float = Field(..., gt=0, description="Radius in pixels")
    n_angles: int = Field(64, ge=1)


class ExperimentConfig(BaseModel):
    """One reproducible run"""
    name: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    kind: ExperimentKind
    seed: int = Field(..., ge=0, description="Global seed")
    output_dir: Optional[Path] = Field(None, description="Artifact root (default: RESULTS_ROOT/name)")
    dataset: DatasetSpec
    forward: ForwardModelSettings
    generator: DeepDecoderConfig = Field(default_factory=DeepDecoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    reconstruction: ReconstructionSettings = Field(default_factory=ReconstructionSettings)
    baseline: Optional[BaselineSettings] = None
    selection: Optional[ModelSelectionSettings] = None
    ring: Optional[RingSpec] = None
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def validate_kind(self):
        """Operator kind and optional sections must match the experiment kind"""
        if tuple(self.generator.output_size) != tuple(self.dataset.size):
            raise ValueError("generator output_size must equal dataset size")
        if self.kind is ExperimentKind.CS_INTERFEROMETRY and self.forward.kind is not MeasurementKind.INTERFEROMETRIC_CS:
            raise ValueError("cs-interferometry needs forward.kind interferometric_cs")
        if self.kind is ExperimentKind.PHASE_RETRIEVAL and self.forward.kind not in PHASE_RETRIEVAL_KINDS:
            raise ValueError("phase-retrieval needs a phase retrieval forward.kind")
        if self.kind is ExperimentKind.DENOISE and self.forward.kind is not MeasurementKind.DENOISE:
            raise ValueError("denoise needs forward.kind denoise")
        if self.kind is ExperimentKind.MODEL_SELECT and self.selection is None:
            raise ValueError("model-select needs a selection section")
        if self.kind is ExperimentKind.BASELINE and self.baseline is None:
            raise ValueError("baseline needs a baseline section")
        return self
