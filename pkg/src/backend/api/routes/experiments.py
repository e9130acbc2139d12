"""
Experiment and metric API routes
"""

from fastapi import APIRouter, HTTPException, status
from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Optional
from pathlib import Path
import numpy as np
import structlog
from starlette.concurrency import run_in_threadpool

from src.backend.core.config import settings
from src.backend.models.experiment_models import ExperimentConfig
from src.backend.services.experiment_runner import RunSummary, run_experiment
from src.backend.services.metrics import Ambiguity, psnr, registered_psnr
from src.backend.utils.artifact_store import ArtifactStore

logger = structlog.get_logger()
router = APIRouter()


class PsnrRequest(BaseModel):
    """Two small images and an optional ambiguity group"""
    x_hat: List[List[float]] = Field(..., description="Estimate, rows of pixels")
    x_ref: List[List[float]] = Field(..., description="Reference, rows of pixels")
    peak: float = Field(1.0, gt=0)
    group: List[Ambiguity] = Field(default_factory=list, description="Ambiguities to register over")

    @model_validator(mode="after")
    def validate_size(self):
        """Rectangular images, small enough for the orbit search"""
        for image in (self.x_hat, self.x_ref):
            if not image or len({len(row) for row in image}) != 1 or not image[0]:
                raise ValueError("images must be non-empty and rectangular")
            if len(image) * len(image[0]) > 4096:
                raise ValueError("images are limited to 4096 pixels")
        return self


class PsnrResponse(BaseModel):
    psnr: Optional[float] = Field(None, description="dB; null when the images are identical")
    registered: bool


def _finite_or_none(value: float) -> Optional[float]:
    return value if np.isfinite(value) else None


def _run_dir(name: str) -> ArtifactStore:
    if "/" in name or name.startswith("."):
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Invalid experiment name")
    return ArtifactStore(Path(settings.RESULTS_ROOT) / name)


@router.post("/api/experiments/run", response_model=RunSummary)
async def run(config: ExperimentConfig):
    """Run an experiment synchronously into RESULTS_ROOT/<name>"""
    store = _run_dir(config.name)
    logger.info("Experiment requested", name=config.name, kind=config.kind.value)
    return await run_in_threadpool(run_experiment, config, store.root)


@router.get("/api/experiments/{name}/metrics")
async def metrics(name: str) -> Dict[str, Any]:
    """Metrics CSV of a finished run as records"""
    store = _run_dir(name)
    relative = "scores.csv" if store.exists("scores.csv") else "metrics.csv"
    frame = store.read_csv(relative)
    clean = frame.replace([np.inf, -np.inf], np.nan)
    records = clean.astype(object).where(clean.notna(), None)
    return {"name": name, "file": relative, "records": records.to_dict(orient="records")}


@router.post("/api/metrics/psnr", response_model=PsnrResponse)
async def compute_psnr(request: PsnrRequest):
    """PSNR, or registered PSNR when a group is given"""
    x_hat = np.asarray(request.x_hat, dtype=np.float64)
    x_ref = np.asarray(request.x_ref, dtype=np.float64)
    if request.group:
        value = registered_psnr(x_hat, x_ref, request.group, request.peak)
    else:
        value = psnr(x_hat, x_ref, request.peak)
    return PsnrResponse(psnr=_finite_or_none(value), registered=bool(request.group))
